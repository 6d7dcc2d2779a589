"""Smoke test for the fpsattn Python extension.

Build and install first:

    pip install maturin
    pip install --no-build-isolation -e crates/python

then run `python python/smoke_test.py`.
"""

import math
import random

import fpsattn


def random_rows(rng, n, d):
    return [[rng.gauss(0.0, 1.0) for _ in range(d)] for _ in range(n)]


def check_fp8():
    assert fpsattn.decode(0x7E, "e4m3") == 448.0
    assert fpsattn.encode(448.0, "e4m3") == 0x7E
    assert fpsattn.decode(0x7B, "e5m2") == 57344.0
    assert fpsattn.encode(0.0) == 0
    for code in range(256):
        if code & 0x7F == 0x7F:
            continue
        assert fpsattn.encode(fpsattn.decode(code, "e4m3"), "e4m3") == code
    scale = fpsattn.compute_scale([0.5, -896.0, 3.0])
    assert scale == 2.0
    assert fpsattn.quantize_dequantize(896.0, scale) == 896.0
    try:
        fpsattn.decode(1, "e3m4")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown format accepted")


def check_grid_and_mask():
    tm = fpsattn.TileMap((4, 8, 8), 16, (2, 4, 4))
    assert tm.tile_grid_dims == (2, 2, 2)
    assert tm.tiles_total == 8 and tm.tile_volume == 32 and tm.tokens == 256
    assert sorted(tm.tile_contiguous_order()) == list(range(256))

    mask = fpsattn.BlockMask((1, 1, 1), (2, 2, 2))
    assert mask.density == 1 / 8
    assert all(mask.allowed(u) == [u] for u in range(8))
    full = fpsattn.BlockMask((3, 3, 3), (2, 2, 2))
    assert full.density == 1.0
    assert full.dump().count("\n") == 8


def check_attention():
    rng = random.Random(0)
    tm = fpsattn.TileMap((2, 4, 4), 8, (1, 2, 2))
    q, k, v = (random_rows(rng, tm.tokens, 8) for _ in range(3))
    dense = fpsattn.dense_reference(q, k, v, tm)
    covering = fpsattn.sparse_reference(q, k, v, tm, (3, 3, 3))
    assert dense == covering
    sparse = fpsattn.sparse_reference(q, k, v, tm, (1, 1, 1))
    passthrough = fpsattn.fps_forward(q, k, v, tm, (1, 1, 1), passthrough=True)
    assert passthrough == sparse
    quantized = fpsattn.fps_forward(q, k, v, tm, (1, 1, 1), format="e4m3")
    flat_ref = [x for row in sparse for x in row]
    flat_q = [x for row in quantized for x in row]
    assert fpsattn.cosine_similarity(flat_ref, flat_q) > 0.98
    assert fpsattn.snr_db(flat_ref, flat_q) > 20.0
    assert fpsattn.mse(flat_ref, flat_ref) == 0.0
    assert math.isinf(fpsattn.snr_db(flat_ref, flat_ref))
    assert fpsattn.flops_sparse(32, 8, 0.5) == fpsattn.flops_dense(32, 8) // 2


def check_schedule_and_experiment():
    sched = fpsattn.Schedule(total_steps=50)
    assert sched.violations() == []
    assert sched.regime_at(1) == "early"
    assert sched.regime_at(50) == "late"
    assert sched.params_at(20) == ((6, 8, 8), (6, 6, 6))

    cfg = fpsattn.Config(
        """
        seed = 3
        [grid]
        t_frames = 4
        height = 8
        width = 8
        d_model = 16
        [schedule]
        total_steps = 4
        [schedule.early]
        tile = { tile_t = 4, tile_h = 8, tile_w = 8 }
        window = { win_t = 3, win_h = 3, win_w = 1 }
        [schedule.mid]
        tile = { tile_t = 1, tile_h = 2, tile_w = 2 }
        window = { win_t = 6, win_h = 6, win_w = 6 }
        [schedule.late]
        tile = { tile_t = 2, tile_h = 4, tile_w = 4 }
        window = { win_t = 6, win_h = 6, win_w = 1 }
        """
    )
    assert cfg.problems() == []
    rows = fpsattn.run_experiment(cfg)
    assert [r["step"] for r in rows] == [1, 2, 3, 4]
    assert all(r["cosine_sim"] > 0.98 for r in rows)
    csv = fpsattn.run_experiment_csv(cfg)
    assert csv.splitlines()[0] == fpsattn.CSV_HEADER
    assert len(csv.splitlines()) == 5
    assert fpsattn.Config(cfg.to_toml()).to_toml() == cfg.to_toml()

    cfg.passthrough = True
    assert all(r["mse"] == 0.0 for r in fpsattn.run_experiment(cfg))

    bad = fpsattn.Config()
    bad.heads = 0
    assert bad.problems()
    try:
        fpsattn.run_experiment(bad)
    except ValueError:
        pass
    else:
        raise AssertionError("invalid config accepted")


def main():
    check_fp8()
    check_grid_and_mask()
    check_attention()
    check_schedule_and_experiment()
    print("smoke test passed")


if __name__ == "__main__":
    main()
