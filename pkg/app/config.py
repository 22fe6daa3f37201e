import os
from typing import Literal

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", env_prefix="REFCOMP_", extra="ignore")

    # 并行配置
    threads: int = os.cpu_count() or 1
    prefetch_depth: int = 2

    # 日志配置
    log_level: str = "INFO"
    log_format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    # 存储配置
    cloud_format: Literal["pcb", "xyz"] = "pcb"
    keep_checkpoints: int = 2

    # 数值配置
    knn_chunk_rows: int = 256


settings = Settings()
