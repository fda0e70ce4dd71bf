import subprocess
import sys

import numpy as np
import pytest

from alit.bitstream import HEADER_SIZE, decode_bitstream
from alit.data import gen_shapes, read_ppm, write_ppm
from alit.training import load_checkpoint

TINY = """\
base_dim = 16
base_codes = 16
base_depth = 1
base_heads = 2
d_model = 16
heads = 2
enc_depth = 1
dec_depth = 1
factor_dim = 4
latent_codes = 16
batch_size = 4
n_train = 16
quant_warmup = 1
log_every = 1
"""


def alit(*args, cwd=None):
    return subprocess.run([sys.executable, "-m", "alit", *map(str, args)], capture_output=True, text=True,
                          cwd=cwd, timeout=300)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.cfg").write_text(TINY)
    r = alit("gen-data", "--n", 16, "--seed", 3, "--out", d / "data.npz")
    assert r.returncode == 0, r.stderr
    r = alit("train-base", "--config", d / "tiny.cfg", "--data", d / "data.npz", "--steps", 3, "--out", d / "base.ckpt")
    assert r.returncode == 0, r.stderr
    r = alit("train-alit", "--config", d / "tiny.cfg", "--data", d / "data.npz", "--init", d / "base.ckpt",
             "--steps", 3, "--out", d / "s1.ckpt")
    assert r.returncode == 0, r.stderr
    (d / "img.ppm").write_bytes(write_ppm(gen_shapes(1, 9).images[0]))
    return d


def test_help_exits_zero():
    assert alit("--help").returncode == 0


def test_usage_errors_exit_two(work):
    assert alit().returncode == 2
    assert alit("no-such-command").returncode == 2
    assert alit("encode", "--ckpt", work / "s1.ckpt", "--image", work / "img.ppm", "--budget", 8).returncode == 2
    both = alit("encode", "--ckpt", work / "s1.ckpt", "--image", work / "img.ppm", "--budget", 8,
                "--tsc-l1", 0.1, "--out", work / "x.bin")
    assert both.returncode == 2
    bad_budget = alit("encode", "--ckpt", work / "s1.ckpt", "--image", work / "img.ppm", "--budget", 12,
                      "--out", work / "x.bin")
    assert bad_budget.returncode == 2 and "budget" in bad_budget.stderr


def test_runtime_errors_exit_one(work):
    r = alit("decode", "--ckpt", work / "missing.ckpt", "--bitstream", work / "x.bin", "--out", work / "y.ppm")
    assert r.returncode == 1
    (work / "junk.bin").write_bytes(b"JUNK" + bytes(16))
    r = alit("decode", "--ckpt", work / "s1.ckpt", "--bitstream", work / "junk.bin", "--out", work / "y.ppm")
    assert r.returncode == 1 and "magic" in r.stderr
    (work / "bad.cfg").write_text("nonsense = 1\n")
    r = alit("gen-data", "--config", work / "bad.cfg", "--out", work / "z.npz")
    assert r.returncode == 1 and "line 1" in r.stderr


def test_train_writes_metrics_csv(work):
    header = (work / "s1.csv").read_text().splitlines()[0]
    assert header == "step,stage,iteration,token_ce,pixel_l1,commit,codebook,perplexity"
    assert load_checkpoint(work / "s1.ckpt").meta["stage"] == "stage1"


def test_encode_budget_then_decode(work):
    r = alit("encode", "--ckpt", work / "s1.ckpt", "--image", work / "img.ppm", "--budget", 8, "--out", work / "b8.bin")
    assert r.returncode == 0, r.stderr
    data = (work / "b8.bin").read_bytes()
    idx, K = decode_bitstream(data)
    assert len(idx) == 8 and K == 16
    assert len(data) - HEADER_SIZE == 4  # 8 tokens x 4 bits
    r = alit("decode", "--ckpt", work / "s1.ckpt", "--bitstream", work / "b8.bin", "--out", work / "b8.ppm")
    assert r.returncode == 0, r.stderr
    img = read_ppm((work / "b8.ppm").read_bytes())
    assert img.shape == (32, 32, 3)


def test_encode_is_deterministic(work):
    for name in ("e1.bin", "e2.bin"):
        r = alit("encode", "--ckpt", work / "s1.ckpt", "--image", work / "img.ppm", "--budget", 16,
                 "--out", work / name)
        assert r.returncode == 0, r.stderr
    assert (work / "e1.bin").read_bytes() == (work / "e2.bin").read_bytes()


def test_zero_threshold_uses_full_budget(work):
    r = alit("encode", "--ckpt", work / "s1.ckpt", "--image", work / "img.ppm", "--tsc-l1", 0.0, "--out", work / "t.bin")
    assert r.returncode == 0, r.stderr
    idx, _ = decode_bitstream((work / "t.bin").read_bytes())
    assert len(idx) == 64


def test_rollout_trace_csv(work):
    r = alit("rollout-trace", "--ckpt", work / "s1.ckpt", "--data", work / "data.npz", "--limit", 2, "--halting")
    assert r.returncode == 0, r.stderr
    lines = r.stdout.splitlines()
    assert len(lines) == 1 + 2 * 8
    assert lines[0] == "image_id,iteration,token_count,token_ce,pixel_l1,halted_count"


def test_tsc_curve_is_non_increasing(work):
    r = alit("tsc-curve", "--ckpt", work / "s1.ckpt", "--data", work / "data.npz", "--limit", 4,
             "--thresholds", 0.3, 0.0, 0.1)
    assert r.returncode == 0, r.stderr
    rows = [line.split(",") for line in r.stdout.splitlines()[1:]]
    taus = [float(row[1]) for row in rows]
    fracs = [float(row[2]) for row in rows]
    assert taus == sorted(taus)
    assert all(a >= b for a, b in zip(fracs, fracs[1:]))


def test_attn_maps_written(work):
    out = work / "maps"
    r = alit("attn-maps", "--ckpt", work / "s1.ckpt", "--image", work / "img.ppm", "--iteration", 2, "--out", out)
    assert r.returncode == 0, r.stderr
    assert len(list(out.glob("token_*.pgm"))) == 16
    assert (out / "index.csv").read_text().startswith("token,file,iteration,layer,peak")


def test_checkpoint_roundtrip_is_bit_exact(work):
    raw = (work / "s1.ckpt").read_bytes()
    ck = load_checkpoint(work / "s1.ckpt")
    assert ck.to_bytes() == raw
    model, _ = ck.to_model()
    again = type(ck).from_bytes(raw)
    for k, v in ck.tensors.items():
        np.testing.assert_array_equal(v, again.tensors[k])
    assert model.cfg.d_model == 16
