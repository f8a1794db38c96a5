"""Smoke test for the metalora_py extension.

Build it first, either with `maturin develop -m crates/python/Cargo.toml`
or by copying the cdylib next to this file:

    cargo build --release -p metalora-py
    cp target/release/libmetalora_py.so python/metalora_py.so
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import metalora_py as ml  # noqa: E402


def check_flops():
    b = ml.ViTConfig.vit_b16()
    d = 768
    expect = 12 * (3 * 197 * d * d + 2 * 197 * 197 * d + 8 * 197 * d * d)
    assert ml.flops_estimate(b, [197] * 12) == expect
    assert b.flops() == expect
    assert b.flops({11: 0.75}) > b.flops({5: 0.75})
    rows = ml.flops_table(b, [{11: 0.75}], [0.75])
    assert rows[0][2] == 0.0
    assert -76.0 < rows[-1][2] < -72.0


def check_schedule():
    assert math.isclose(ml.lr_at(0), 1e-5)
    assert math.isclose(ml.lr_at(25), 1e-3)


def check_prototypes():
    p = ml.proto_probs([[0.0, 0.0], [3.0, 4.0]], [[0.0, 0.0], [3.0, 4.0]])
    for row in p:
        assert abs(sum(row) - 1.0) < 1e-9
    assert p[0][0] > p[0][1] and p[1][1] > p[1][0]


def check_model(tmp):
    cfg = ml.ViTConfig.desk()
    vit = ml.ViT(cfg, seed=1)
    c, h, w = cfg.image_shape
    images = [[((i * 7 + j) % 13) / 13.0 for j in range(c * h * w)] for i in range(3)]

    fresh = ml.LoRAAdapter(cfg, rank=4, seed=2)
    base = vit.embed(images)
    assert vit.embed(images, adapter=fresh) == base
    assert len(base) == 3 and len(base[0]) == cfg.embed_dim

    rnd = ml.LoRAAdapter.random(cfg, rank=4, seed=3)
    path = os.path.join(tmp, "a.lrcy")
    rnd.save(path)
    assert ml.LoRAAdapter.load(path) == rnd
    avg = ml.LoRAAdapter.average([rnd, rnd])
    assert avg.num_params == rnd.num_params

    before = vit.fingerprint()
    vit.embed(images, adapter=rnd, pruned={0: 0.75})
    assert vit.fingerprint() == before


def check_config():
    cfg = ml.PipelineConfig()
    again = ml.PipelineConfig.from_toml(cfg.to_toml())
    assert again.to_dict() == cfg.to_dict()
    try:
        ml.PipelineConfig.from_toml("[teachers]\nn_way = 3\n")
    except ml.MetaloraError as e:
        assert str(e).startswith("config")
    else:
        raise AssertionError("mismatched n_way accepted")


def check_pipeline(tmp):
    text = """
seed = 3
[data]
images_per_class = 8
[pretrain]
images_per_class = 8
[backbone]
steps = 5
[teachers]
count = 2
max_steps = 20
min_steps = 10
[inversion]
iterations = 5
[meta]
iterations = 4
[eval]
episodes = 5
q_query = 4
"""
    cfg = ml.PipelineConfig.from_toml(text)
    ws = ml.Workspace(os.path.join(tmp, "run"))
    report = ws.all(cfg)
    names = [m["method"] for m in report["methods"]]
    assert names == ["meta_lora", "nn_baseline", "loras_avg_nn", "random_lora"]
    assert all(0.0 <= m["accuracy"] <= 100.0 for m in report["methods"])
    with open(os.path.join(tmp, "run", "report.json")) as f:
        assert json.load(f) == report


def main():
    with tempfile.TemporaryDirectory() as tmp:
        check_flops()
        check_schedule()
        check_prototypes()
        check_model(tmp)
        check_config()
        check_pipeline(tmp)
    print("smoke test ok")


if __name__ == "__main__":
    main()
