import json
import os

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from helpers import random_masks
from vitprune import arch, checkpoint, cli, config, data
from vitprune.losses import LossConfig
from vitprune.model import ViT
from vitprune.sparsity import sparsify
from vitprune.train import AdamW, TrainConfig, cosine_lr, evaluate, predict, scaled_lr, train


def params_equal(a, b):
    return a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)


def state(model):
    return {k: p.data for k, p in model.params.items()}


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def test_roundtrip_bit_exact(tmp_path):
    spec = arch.desk()
    m = ViT.create(spec, seed=3)
    m.masks, _ = random_masks(spec, np.random.default_rng(0), 6)
    sparsify(m)
    opt = AdamW(m.params)
    opt.m["head_w"][:] = 0.25
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, checkpoint.Checkpoint.from_model(
        m, optimizer=opt.state_dict(), counters={"epochs": 3}, metrics={"acc": 0.5}, config_hash="abc"))
    ck = checkpoint.load(path)
    back = ck.to_model()
    assert back.spec == spec and back.masks == m.masks
    assert params_equal(state(back), state(m))
    assert all(np.array_equal(back.sparsity[k], m.sparsity[k]) for k in m.sparsity)
    assert ck.optimizer["m.head_w"].tobytes() == opt.state_dict()["m.head_w"].tobytes()
    assert ck.counters == {"epochs": 3} and ck.metrics == {"acc": 0.5} and ck.config_hash == "abc"
    # re-encoding the loaded checkpoint reproduces the file byte for byte
    assert checkpoint.encode(ck) == path.read_bytes()


def test_payload_is_float32_le(tmp_path):
    spec = arch.desk()
    m = ViT.create(spec)
    raw = checkpoint.encode(checkpoint.Checkpoint.from_model(m))
    assert raw[:8] == b"VITPRUNE"
    hlen = int.from_bytes(raw[12:20], "little")
    header = json.loads(raw[20:20 + hlen])
    first = header["tensors"][0]
    arr = np.frombuffer(raw, "<f4", count=first["nbytes"] // 4, offset=20 + hlen + first["offset"])
    np.testing.assert_array_equal(arr.reshape(first["shape"]), m.params[first["name"]].data)


def test_corrupt_checkpoints(tmp_path):
    raw = checkpoint.encode(checkpoint.Checkpoint.from_model(ViT.create(arch.desk())))
    for bad in (b"NOTACKPT" + raw[8:], raw[:15], raw[:30], raw[:-10]):
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.decode(bad)


def test_atomic_write_leaves_no_temp(tmp_path):
    checkpoint.atomic_write(tmp_path / "x.bin", b"abc")
    assert os.listdir(tmp_path) == ["x.bin"]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_zero_epochs_is_init():
    spec = arch.desk(num_classes=2)
    ds = data.separable(64, 32, 3)
    m = ViT.create(spec, seed=5)
    init = {k: v.copy() for k, v in state(m).items()}
    assert train(m, ds, TrainConfig(epochs=0), LossConfig("ce_only")) == []
    assert params_equal(state(m), init)


def test_seeded_training_bit_identical():
    spec = arch.desk(num_classes=8)
    ds, _ = data.synthetic_split(8, 64, 8, seed=1)

    def once():
        m = ViT.create(spec, seed=2)
        with threadpool_limits(1):
            train(m, ds, TrainConfig(epochs=2, batch_size=16, augment=True, seed=4), LossConfig("cnn_only"))
        return state(m)
    assert params_equal(once(), once())


def test_separable_has_perfect_linear_probe():
    ds = data.separable(256, 32, 3, seed=4)
    w = np.random.default_rng(4).standard_normal(3 * 32 * 32)
    proj = ds.images.reshape(256, -1).astype(np.float64) @ (w / np.linalg.norm(w))
    assert ((proj > 0) == (ds.labels == 1)).all()
    assert np.abs(proj).min() >= 1.0 - 1e-4


def test_separable_reaches_99():
    spec = arch.desk(num_classes=2)
    ds = data.separable(256, 32, 3, seed=0)
    m = ViT.create(spec, seed=0)
    hist = train(m, ds, TrainConfig(epochs=20, batch_size=32, lr=1e-3, warmup_epochs=1), LossConfig("ce_only"))
    assert max(h["train_acc"] for h in hist) >= 0.99


def test_lr_rules():
    assert scaled_lr(0.0002, 512) == pytest.approx(0.0002)
    assert scaled_lr(0.0005, 64) == pytest.approx(0.0005 / 8)
    assert cosine_lr(0, 100, 1.0, warmup=10) == pytest.approx(0.1)
    assert cosine_lr(10, 100, 1.0, warmup=10) == pytest.approx(1.0)
    assert cosine_lr(55, 100, 1.0, warmup=10) == pytest.approx(0.5)
    assert cosine_lr(100, 100, 1.0, warmup=10) == pytest.approx(0.0, abs=1e-12)


def test_adamw_skips_decay_on_vectors():
    spec = arch.desk()
    m = ViT.create(spec)
    opt = AdamW(m.params, lr=0.1, weight_decay=0.5)
    before = {k: v.copy() for k, v in state(m).items()}
    for p in m.params.values():
        p.grad = np.zeros_like(p.data)
    opt.step()
    for k, p in m.params.items():
        if p.data.ndim < 2 or k == "pos_embed":
            np.testing.assert_array_equal(p.data, before[k])
        else:
            np.testing.assert_allclose(p.data, before[k] * (1 - 0.05), rtol=1e-6)


def tied_model(spec, seed=0):
    m = ViT.create(spec, seed=seed)
    P = m.params
    P["dist_token"].data[:] = P["cls_token"].data
    P["pos_embed"].data[1] = P["pos_embed"].data[0]
    P["head_dist_w"].data[:] = P["head_w"].data
    P["head_dist_b"].data[:] = P["head_b"].data
    return m


def test_eval_with_tied_tokens_equals_class_head():
    spec = arch.desk(num_classes=8)
    _, test = data.synthetic_split(8, 8, 64, seed=2)
    m = tied_model(spec)
    out = m(test.images)
    np.testing.assert_array_equal(out["z_c"].data, out["z_d"].data)
    acc_c = float((out["z_c"].data.argmax(1) == test.labels).mean())
    assert evaluate(m, test) == acc_c


def test_eval_batch_size_invariant():
    spec = arch.desk(num_classes=8)
    _, test = data.synthetic_split(8, 8, 70, seed=3)
    m = ViT.create(spec, seed=1)
    accs = {evaluate(m, test, bs) for bs in (1, 7, 32, 256)}
    assert len(accs) == 1
    np.testing.assert_allclose(predict(m, test.images, 5), predict(m, test.images, 70), atol=1e-5)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def test_synthetic_deterministic_and_in_range():
    a, _ = data.synthetic_split(8, 40, 10, seed=9)
    b, _ = data.synthetic_split(8, 40, 10, seed=9)
    assert a.images.tobytes() == b.images.tobytes() and np.array_equal(a.labels, b.labels)
    assert a.labels.min() >= 0 and a.labels.max() < 8
    xs = [x.tobytes() for x, _ in a.batches(8, np.random.default_rng(0))]
    ys = [x.tobytes() for x, _ in a.batches(8, np.random.default_rng(0))]
    assert xs == ys


def test_idx_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (5, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, 5).astype(np.uint8)
    data.write_idx(tmp_path / "x.idx", imgs)
    data.write_idx(tmp_path / "y.idx", labels)
    np.testing.assert_array_equal(data.read_idx(tmp_path / "x.idx"), imgs)
    ds = data.load_idx(tmp_path / "x.idx", tmp_path / "y.idx", 32, 10)
    assert ds.images.shape == (5, 1, 32, 32)
    np.testing.assert_allclose(ds.images[:, 0, 2:30, 2:30], imgs / 255.0, rtol=1e-6)
    assert not ds.images[:, :, :2].any()
    (tmp_path / "bad.idx").write_bytes(b"\x01\x02\x03")
    with pytest.raises(ValueError):
        data.read_idx(tmp_path / "bad.idx")


def test_idx_label_range(tmp_path):
    data.write_idx(tmp_path / "x.idx", np.zeros((2, 4, 4), np.uint8))
    data.write_idx(tmp_path / "y.idx", np.array([0, 12], np.uint8))
    with pytest.raises(ValueError):
        data.load_idx(tmp_path / "x.idx", tmp_path / "y.idx", 8, 10)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_config_defaults_by_command():
    t = config.parse("", "train")
    p = config.parse("", "prune")
    assert t["loss"]["mode"] == "cnn_only" and t["optim"]["lr_base"] == 0.0005 and t["optim"]["warmup_epochs"] == 5
    assert p["loss"]["mode"] == "proposed" and p["optim"]["lr_base"] == 0.0002
    assert p["loss"]["alpha"] == 1e5 and p["loss"]["tau"] == 20.0 and p["prune"]["interval"] == 100
    assert "lr_base = 0.0005" in t.to_ini()


@pytest.mark.parametrize("text,field", [
    ("[nope]\n", "nope"),
    ("[optim]\nbogus = 1\n", "optim.bogus"),
    ("[optim]\nbatch_size = many\n", "optim.batch_size"),
    ("[loss]\nmode = kd\n", "loss.mode"),
    ("[prune]\ntarget_speedup = 0.5\n", "prune.target_speedup"),
    ("[optim]\nbatch_size = 0\n", "optim.batch_size"),
])
def test_config_errors_name_field(text, field):
    with pytest.raises(config.ConfigError) as e:
        config.parse(text, "prune")
    assert e.value.field == field


def test_overrides_and_digest():
    a = config.parse("[run]\nseed = 1\n", "train", {("run", "seed"): 7})
    b = config.parse("[run]\nseed = 7\n", "train")
    assert a["run"]["seed"] == 7 and a.digest() == b.digest()


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------

BASE = """
[model]
preset = desk
[data]
num_classes = 4
train_size = 96
test_size = 48
[optim]
epochs = {epochs}
batch_size = 16
lr = 0.001
warmup_epochs = 0
[prune]
interval = 2
target_speedup = {target}
[loss]
mode = {mode}
"""


def write_cfg(tmp_path, name, epochs=1, target=2.0, mode="", extra=""):
    p = tmp_path / f"{name}.ini"
    p.write_text(BASE.format(epochs=epochs, target=target, mode=mode) + extra)
    return str(p)


def cli_run(tmp_path, command, cfg, out, *extra, capsys=None):
    return cli.main([command, "--config", cfg, "--out", str(tmp_path / out), "--threads", "1", *extra])


def test_exit_codes(tmp_path, capsys):
    assert cli.main(["train"]) == 2
    assert cli.main(["train", "--config", str(tmp_path / "missing.ini")]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[loss]\nmode = kd\n")
    assert cli.main(["train", "--config", str(bad)]) == 2
    assert "loss.mode" in capsys.readouterr().err
    cfg = write_cfg(tmp_path, "p")
    assert cli_run(tmp_path, "prune", cfg, "p") == 2          # no run.checkpoint
    nockpt = write_cfg(tmp_path, "q", extra=f"[run]\ncheckpoint = {tmp_path / 'nope.ckpt'}\n")
    assert cli_run(tmp_path, "prune", nockpt, "q") == 3


def roundtrips(path):
    raw = open(path, "rb").read()
    return checkpoint.encode(checkpoint.decode(raw)) == raw


def test_pipeline(tmp_path, capsys):
    # train
    assert cli_run(tmp_path, "train", write_cfg(tmp_path, "t", epochs=2), "train", "--seed", "3") == 0
    run_dir = tmp_path / "train"
    assert {"config.ini", "env.json", "metrics.jsonl", "model.ckpt"} <= set(os.listdir(run_dir))
    assert json.loads((run_dir / "env.json").read_text())["seed"] == 3
    ckpt = run_dir / "model.ckpt"
    assert roundtrips(ckpt)

    # prune to target 1.0 keeps the architecture
    cfg = write_cfg(tmp_path, "p1", target=1.0, extra=f"[run]\ncheckpoint = {ckpt}\n")
    assert cli_run(tmp_path, "prune", cfg, "p1") == 0
    assert checkpoint.load(tmp_path / "p1" / "model.ckpt").spec == checkpoint.load(ckpt).spec

    # prune 2x
    cfg = write_cfg(tmp_path, "p2", extra=f"[run]\ncheckpoint = {ckpt}\n")
    assert cli_run(tmp_path, "prune", cfg, "p2") == 0
    pdir = tmp_path / "p2"
    assert {"events.jsonl", "lut.txt", "masked.ckpt", "model.ckpt", "config.ini", "env.json"} <= set(os.listdir(pdir))
    pruned = checkpoint.load(pdir / "model.ckpt")
    assert pruned.metrics["status"] == "reached" and pruned.metrics["speedup"] >= 2.0
    assert arch.count_params(pruned.spec) < arch.count_params(checkpoint.load(ckpt).spec)
    assert pruned.counters["prune_steps"] == pruned.metrics["removals"]
    assert roundtrips(pdir / "model.ckpt") and roundtrips(pdir / "masked.ckpt")

    # finetune, sparsify, eval
    cfg = write_cfg(tmp_path, "f", extra=f"[run]\ncheckpoint = {pdir / 'model.ckpt'}\n")
    assert cli_run(tmp_path, "finetune", cfg, "f") == 0
    assert roundtrips(tmp_path / "f" / "model.ckpt")
    cfg = write_cfg(tmp_path, "s", extra=f"[run]\ncheckpoint = {tmp_path / 'f' / 'model.ckpt'}\n"
                    "[sparsify]\nfinetune_epochs = 1\n")
    assert cli_run(tmp_path, "sparsify", cfg, "s") == 0
    sp = checkpoint.load(tmp_path / "s" / "model.ckpt")
    assert sp.sparsity and sp.metrics["pattern_ok"]
    assert roundtrips(tmp_path / "s" / "model.ckpt")
    cfg = write_cfg(tmp_path, "e", extra=f"[run]\ncheckpoint = {tmp_path / 's' / 'model.ckpt'}\n")
    assert cli_run(tmp_path, "eval", cfg, "e") == 0
    ev = json.loads((tmp_path / "e" / "eval.json").read_text())
    assert 0.0 <= ev["top1"] <= 1.0 and ev["n"] == 48

    # analyze replays the event log; a tampered log exits 3
    cfg = write_cfg(tmp_path, "a", extra=f"[run]\ncheckpoint = {pdir / 'masked.ckpt'}\n")
    assert cli_run(tmp_path, "analyze", cfg, "a") == 0
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["replay_mismatches"] == [] and summary["latency_r2"] >= 0.99
    assert (tmp_path / "a" / "diversity.tsv").exists()
    events = [json.loads(l) for l in (pdir / "events.jsonl").read_text().splitlines()]
    for e in events:
        if e["event"] == "removal" and len(e["scores"]) > 1:
            e["group"] = max(e["scores"], key=e["scores"].get)
            break
    bad = tmp_path / "bad.jsonl"
    bad.write_text("\n".join(json.dumps(e) for e in events) + "\n")
    cfg = write_cfg(tmp_path, "a2", extra=f"[analyze]\nevents = {bad}\n")
    assert cli_run(tmp_path, "analyze", cfg, "a2") == 3


def test_generate_and_profile(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "g", extra="[generate]\nemb = 192\n")
    assert cli_run(tmp_path, "generate", cfg, "g") == 0
    doc = json.loads((tmp_path / "g" / "spec.json").read_text())
    assert doc["spec"]["blocks"][0] == {"h": 10, "qk": 16, "v": 64, "mlp": 576}
    cfg = write_cfg(tmp_path, "pr", extra="[lut]\ngrid = paper\n")
    assert cli_run(tmp_path, "profile", cfg, "pr") == 0
    out = capsys.readouterr().out.strip().splitlines()[-1]
    assert json.loads(out)["measured"] == 9375


def test_cli_training_deterministic(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "d", epochs=1)
    assert cli_run(tmp_path, "train", cfg, "d1", "--seed", "5") == 0
    assert cli_run(tmp_path, "train", cfg, "d2", "--seed", "5") == 0
    a = checkpoint.load(tmp_path / "d1" / "model.ckpt")
    b = checkpoint.load(tmp_path / "d2" / "model.ckpt")
    assert params_equal(a.params, b.params)
