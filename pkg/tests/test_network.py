import numpy as np
import pytest

from app.models.errors import CheckpointError, InvalidArgumentError, ShapeError
from app.services.autodiff import reachable_parameters
from app.services.network import SHARED_MODULES, RefCompNetwork


@pytest.fixture
def net(toy_arch):
    return RefCompNetwork(toy_arch).initialize(0)


def test_shared_layout_has_single_trio_and_no_discriminators(net):
    names = list(net.store)
    assert "encoder_p.layer0.weight" in names
    assert "lsfm.fuse_res.bias" in names
    assert not any(n.startswith(("reference.", "target.")) for n in names)
    assert net.discriminator_names() == []


def test_no_share_doubles_the_trio(toy_arch, net):
    split = RefCompNetwork(toy_arch, no_share=True).initialize(0)
    assert "reference.encoder_p.layer0.weight" in split.store
    assert "target.decoder_c.layer0.weight" in split.store
    assert split.shared_trio_count("reference") == net.shared_trio_count()
    assert split.shared_trio_count("target") == net.shared_trio_count()
    assert split.store.count() == net.store.count() + net.shared_trio_count()


def test_adversarial_network_adds_discriminators(toy_arch):
    adv = RefCompNetwork(toy_arch, adversarial=True).initialize(0)
    disc = adv.discriminator_names()
    assert disc and all(n.startswith("disc_") for n in disc)
    assert set(adv.generator_names()).isdisjoint(disc)
    assert adv.discriminate_latent(adv.encode_complete(np.ones((3, 16, 3)))).shape == (3,)


def test_encoders_are_permutation_invariant(net, rng):
    partial = rng.normal(size=(2, 8, 3))
    z = net.encode_partial(partial).values
    assert z.shape == (2, 6)
    assert np.allclose(net.encode_partial(partial[:, rng.permutation(8)]).values, z, atol=1e-12)


def test_complete_produces_fixed_size_cloud(net, rng):
    z_mask = net.encode_mask(rng.normal(size=(8, 3)))
    completed = net.complete(rng.normal(size=(8, 3)), z_mask)
    assert completed.shape == (1, 16, 3)
    assert np.all(np.isfinite(completed.values))


def test_wrong_point_count_is_a_shape_error(net, rng):
    with pytest.raises(ShapeError):
        net.encode_partial(rng.normal(size=(7, 3)))
    with pytest.raises(ShapeError):
        net.lsfm(net.encode_partial(rng.normal(size=(2, 8, 3))), net.encode_mask(rng.normal(size=(1, 8, 3))))


def test_discriminators_require_adversarial_mode(net):
    with pytest.raises(InvalidArgumentError):
        net.discriminate_cloud(np.ones((1, 16, 3)))
    with pytest.raises(InvalidArgumentError):
        net.decode(net.encode_complete(np.ones((16, 3))), head="side")


def test_branches_share_parameter_storage(net, rng):
    partial = rng.normal(size=(1, 8, 3))
    z_mask = net.encode_mask(partial)
    reference = reachable_parameters(net.complete(partial, z_mask, "reference"))
    target = reachable_parameters(net.complete(partial, z_mask, "target"))
    assert reference == target
    assert any(n.startswith("lsfm.") for n in reference)


def test_no_share_branches_touch_disjoint_trios(toy_arch, rng):
    split = RefCompNetwork(toy_arch, no_share=True).initialize(0)
    partial = rng.normal(size=(1, 8, 3))
    z_mask = split.encode_mask(partial)
    reference = reachable_parameters(split.complete(partial, z_mask, "reference"))
    target = reachable_parameters(split.complete(partial, z_mask, "target"))
    assert reference & target == {n for n in reference if n.startswith("encoder_m.")}
    assert {n.split(".")[0] for n in target} == {"target", "encoder_m"}
    assert {n.split(".")[1] for n in target if n.startswith("target.")} == set(SHARED_MODULES)


def test_bypass_lsfm_skips_fusion(toy_arch, rng):
    gan = RefCompNetwork(toy_arch, bypass_lsfm=True).initialize(0)
    partial = rng.normal(size=(1, 8, 3))
    touched = reachable_parameters(gan.complete(partial, gan.encode_mask(partial)))
    assert not any(n.startswith("lsfm.") for n in touched)


def test_from_snapshot_validates_names_and_shapes(toy_arch, net):
    snapshot = net.store.snapshot()
    rebuilt = RefCompNetwork.from_snapshot(toy_arch, snapshot)
    assert np.array_equal(rebuilt.store["lsfm.out.weight"].values, snapshot["lsfm.out.weight"])

    missing = dict(snapshot)
    missing.pop("decoder_r.layer0.bias")
    with pytest.raises(CheckpointError):
        RefCompNetwork.from_snapshot(toy_arch, missing)

    reshaped = dict(snapshot)
    reshaped["lsfm.out.weight"] = np.zeros((2, 2))
    with pytest.raises(CheckpointError):
        RefCompNetwork.from_snapshot(toy_arch, reshaped)
