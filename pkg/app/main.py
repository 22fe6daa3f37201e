# app/main.py
import logging
from typing import Optional

import typer

from app.api.commands import cli
from app.config import settings

# 配置日志
logging.basicConfig(
    level=settings.log_level,
    format=settings.log_format
)

app = cli


@app.callback()
def main(log_level: Optional[str] = typer.Option(None, "--log-level", help="覆盖 REFCOMP_LOG_LEVEL")):
    """RefComp: 用参考对学习无配对点云补全"""
    if log_level:
        logging.getLogger().setLevel(log_level.upper())


if __name__ == "__main__":
    app()
