"""Smoke test for the eit_py extension module.

Build and install first, e.g. `pip install ./crates/py` or
`maturin develop -m crates/py/Cargo.toml`, then run this file.
"""

import json
import math
import sys
import tempfile
from pathlib import Path

import eit_py


def main():
    mesh = eit_py.disk_mesh(0)
    assert mesh.electrode_count == 16
    assert mesh.triangle_count == len(mesh.triangles) == 405
    assert abs(sum(mesh.areas()) - math.pi) < 0.05

    sigma = [1.0] * mesh.triangle_count
    v = eit_py.forward_map(mesh, sigma)
    assert len(v) == 240
    # Grounded: each pattern's voltages sum to zero.
    for j in range(15):
        assert abs(sum(v[16 * j:16 * (j + 1)])) < 1e-12
    # Doubling σ halves the voltages when impedances shrink by half too.
    halved = eit_py.disk_mesh(0, contact_impedance=0.005)
    w = eit_py.forward_map(halved, [2.0] * mesh.triangle_count)
    assert max(abs(a - 2 * b) for a, b in zip(v, w)) < 1e-10 * max(map(abs, v))

    r = eit_py.resistivity_matrix(mesh, sigma)
    assert max(abs(r[i][j] - r[j][i]) for i in range(16) for j in range(16)) < 1e-12
    assert eit_py.data_misfit(v, v, 2e-4) == 0.0

    field = eit_py.sample_field(1.0, 2.0, 2.0, "neumann", 16, seed=3)
    assert len(field) == 256
    assert field == eit_py.sample_field(1.0, 2.0, 2.0, "neumann", 16, seed=3)
    assert 0 < eit_py.effective_sample_size(field) <= 256

    config = json.loads(eit_py.preset_config("desk_b_log_gaussian"))
    config.pop("output_dir", None)
    config["mesh"]["fine_level"], config["mesh"]["coarse_level"] = 1, 0
    config["chain"].update(n_samples=200, burn_in=50, snapshot_every=50)
    config["report"]["raster_size"] = 16
    with tempfile.TemporaryDirectory() as out:
        digest = eit_py.run_pipeline(json.dumps(config), out)
        manifest = json.loads((Path(out) / "manifest.json").read_text())
        assert manifest["config_hash"] == digest
        assert (Path(out) / "report" / "summary.txt").exists()

    try:
        eit_py.preset_config("nope")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown preset accepted")

    print("eit_py smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
