import numpy as np
import pytest
from oracles import make_model, make_tau

from jointebm import checkpoint
from jointebm.errors import ParseError
from jointebm.nets import NetSpec, Network
from jointebm.spaces import binary_vectors, permutation_matrices


@pytest.mark.parametrize("space,kind,coupling", [
    (binary_vectors(4), "mlp", "linear_quadratic"),
    (permutation_matrices(3), "icnn", "bilinear"),
])
def test_round_trip_bitwise(tmp_path, space, kind, coupling):
    rng = np.random.default_rng(0)
    model = make_model(space, kind, coupling, rng=rng)
    tau = make_tau("resnet", 3, 5, rng)
    gen = Network(NetSpec("linear", 3, space.k), rng.normal(size=4 * space.k))
    meta = {"feature_mean": [0.5, 1.0], "note": "x"}
    checkpoint.save(tmp_path / "c.bin", checkpoint.Checkpoint(model, tau, gen, meta))
    back = checkpoint.load(tmp_path / "c.bin")
    assert back.model.h_spec == model.h_spec and back.model.coupling == model.coupling
    assert back.model.space == space
    assert np.array_equal(back.model.h_params, model.h_params)
    assert np.array_equal(back.tau.params, tau.params) and back.tau.spec == tau.spec
    assert np.array_equal(back.generator.params, gen.params)
    assert back.meta == meta


def test_optional_networks_absent(tmp_path):
    model = make_model(binary_vectors(2))
    checkpoint.save(tmp_path / "c.bin", checkpoint.Checkpoint(model))
    back = checkpoint.load(tmp_path / "c.bin")
    assert back.tau is None and back.generator is None and back.meta == {}


def test_corrupt_files(tmp_path):
    model = make_model(binary_vectors(2))
    good = tmp_path / "c.bin"
    checkpoint.save(good, checkpoint.Checkpoint(model))
    blob = good.read_bytes()
    cases = {
        "magic": b"XXXXXXXX" + blob[8:],
        "short": blob[:12],
        "params": blob[:-8],
        "json": blob[:16] + b"!" + blob[17:],
        "keys": checkpoint.MAGIC + (2).to_bytes(8, "little") + b"{}",
    }
    for name, data in cases.items():
        p = tmp_path / f"{name}.bin"
        p.write_bytes(data)
        with pytest.raises(ParseError):
            checkpoint.load(p)
