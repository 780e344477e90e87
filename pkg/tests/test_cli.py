import json
from pathlib import Path

import numpy as np
import pytest

from iat.cli import main
from iat.image_io import ImageRGB, load_image, save_image
from iat.model import IATConfig, iat_init, load_checkpoint, save_checkpoint
from iat.rng import philox

SMALL = {"channels": 8, "blocks": 1, "d": 16}


@pytest.fixture
def clean_dir(tmp_path):
    d = tmp_path / "clean"
    d.mkdir()
    rng = np.random.default_rng(0)
    for i in range(2):
        luma = rng.uniform(0.3, 0.9, (16, 16, 1))
        chroma = rng.uniform(-0.08, 0.08, (16, 16, 3))
        img = ImageRGB(np.clip(luma + chroma, 0, 1).astype(np.float32))
        save_image(img, d / f"clean_{i}.png")
    return d


@pytest.fixture
def identity_ckpt(tmp_path):
    path = tmp_path / "identity.iatc"
    save_checkpoint(iat_init(IATConfig(**SMALL), rng=philox(0)), path)
    return path


def tree_bytes(directory: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


# ---------------------------------------------------------------------------
# synthesize


def test_synthesize_reproducible(clean_dir, tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    argv = ["synthesize", "--clean", str(clean_dir), "--count", "3", "--seed", "7"]
    assert main(argv + ["--out", str(out_a)]) == 0
    assert main(argv + ["--out", str(out_b)]) == 0
    assert tree_bytes(out_a) == tree_bytes(out_b)


def test_synthesize_low_light_sidecars(clean_dir, tmp_path):
    out = tmp_path / "synth"
    argv = [
        "synthesize", "--clean", str(clean_dir), "--out", str(out),
        "--profile", "low_light", "--count", "5", "--seed", "1",
    ]
    assert main(argv) == 0
    sidecars = sorted(out.glob("params_*.json"))
    assert len(sidecars) == 5
    sources = set()
    for sc in sidecars:
        data = json.loads(sc.read_text())
        assert data["degradation"]["exposure"] < 1
        sources.add(data["clean"])
    assert len(sources) == 2  # cycles through both clean images
    assert len(list(out.glob("input_*.png"))) == 5
    assert len(list(out.glob("target_*.png"))) == 5
    assert len(list(out.glob("raw_*.npy"))) == 5


def test_synthesize_empty_clean_dir(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    code = main(["synthesize", "--clean", str(empty), "--out", str(tmp_path / "o")])
    assert code == 1


# ---------------------------------------------------------------------------
# enhance


def test_enhance_identity_checkpoint(clean_dir, identity_ckpt, tmp_path):
    out = tmp_path / "enhanced"
    code = main([
        "enhance", "--checkpoint", str(identity_ckpt),
        "--input", str(clean_dir), "--output", str(out),
    ])
    assert code == 0
    outputs = sorted(out.iterdir())
    assert len(outputs) == 2
    for src in sorted(clean_dir.iterdir()):
        a = load_image(src).pixels
        b = load_image(out / src.name).pixels
        assert np.abs(a - b).max() <= 1 / 255 + 1e-6


def test_enhance_local_only_matches_intermediate(clean_dir, identity_ckpt, tmp_path):
    out_full = tmp_path / "full"
    out_local = tmp_path / "local"
    base = ["enhance", "--checkpoint", str(identity_ckpt), "--input", str(clean_dir)]
    assert main(base + ["--output", str(out_full)]) == 0
    assert main(base + ["--output", str(out_local), "--local-only"]) == 0
    # at identity init both paths are the identity map
    for name in ("clean_0.png", "clean_1.png"):
        a = load_image(out_full / name).pixels
        b = load_image(out_local / name).pixels
        np.testing.assert_array_equal(a, b)


def test_enhance_skips_undecodable(clean_dir, identity_ckpt, tmp_path, capsys):
    (clean_dir / "broken.png").write_bytes(b"not a png")
    out = tmp_path / "enhanced"
    code = main([
        "enhance", "--checkpoint", str(identity_ckpt),
        "--input", str(clean_dir), "--output", str(out),
    ])
    assert code == 0  # some inputs succeeded
    assert "broken.png" in capsys.readouterr().err
    assert len(list(out.iterdir())) == 2


def test_enhance_all_fail(identity_ckpt, tmp_path):
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "a.png").write_bytes(b"junk")
    code = main([
        "enhance", "--checkpoint", str(identity_ckpt),
        "--input", str(bad), "--output", str(tmp_path / "o"),
    ])
    assert code == 2


def test_enhance_threads_match_single(clean_dir, identity_ckpt, tmp_path):
    out1 = tmp_path / "t1"
    out4 = tmp_path / "t4"
    base = ["enhance", "--checkpoint", str(identity_ckpt), "--input", str(clean_dir)]
    assert main(base + ["--output", str(out1), "--threads", "1"]) == 0
    assert main(base + ["--output", str(out4), "--threads", "4"]) == 0
    assert tree_bytes(out1) == tree_bytes(out4)


# ---------------------------------------------------------------------------
# train


def make_dataset(clean_dir, tmp_path, count=3, seed=5):
    data = tmp_path / "data"
    main([
        "synthesize", "--clean", str(clean_dir), "--out", str(data),
        "--count", str(count), "--seed", str(seed),
    ])
    return data


def write_cfg(tmp_path, **extra):
    cfg = dict(SMALL)
    cfg.update(extra)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_train_writes_checkpoint_and_csv(clean_dir, tmp_path, capsys):
    data = make_dataset(clean_dir, tmp_path)
    cfg = write_cfg(tmp_path, steps=6, batch_size=2, crop_size=16, eval_every=3, lr0=1e-3)
    ckpt = tmp_path / "model.iatc"
    code = main(["train", "--data", str(data), "--config", str(cfg), "--out", str(ckpt)])
    assert code == 0
    assert "final val PSNR" in capsys.readouterr().out
    assert ckpt.exists()
    csv_lines = (tmp_path / "model.iatc.csv").read_text().strip().split("\n")
    assert csv_lines[0] == "step,lr,loss,psnr_val"
    assert len(csv_lines) == 7  # header + 6 steps
    params, step = load_checkpoint(ckpt)
    assert step == 6
    assert params.config == IATConfig(**SMALL)


def test_train_flags_override_config(clean_dir, tmp_path):
    data = make_dataset(clean_dir, tmp_path)
    cfg = write_cfg(tmp_path, steps=500, batch_size=2, crop_size=16)
    ckpt = tmp_path / "model.iatc"
    code = main([
        "train", "--data", str(data), "--config", str(cfg),
        "--out", str(ckpt), "--steps", "4", "--eval-every", "2",
    ])
    assert code == 0
    _, step = load_checkpoint(ckpt)
    assert step == 4  # the flag won


def test_train_mixed_raw_without_raw_files(clean_dir, tmp_path, capsys):
    data = make_dataset(clean_dir, tmp_path)
    for raw in data.glob("raw_*.npy"):
        raw.unlink()
    cfg = write_cfg(tmp_path, steps=3, batch_size=1, crop_size=16, loss="mixed_raw")
    code = main([
        "train", "--data", str(data), "--config", str(cfg),
        "--out", str(tmp_path / "m.iatc"),
    ])
    assert code == 1
    assert "input_00000" in capsys.readouterr().err


def test_train_resume_continues_step_counter(clean_dir, tmp_path):
    data = make_dataset(clean_dir, tmp_path)
    cfg = write_cfg(tmp_path, batch_size=2, crop_size=16, eval_every=2, lr0=1e-3)
    first = tmp_path / "first.iatc"
    code = main([
        "train", "--data", str(data), "--config", str(cfg),
        "--out", str(first), "--steps", "4",
    ])
    assert code == 0
    second = tmp_path / "second.iatc"
    code = main([
        "train", "--data", str(data), "--config", str(cfg),
        "--out", str(second), "--steps", "6", "--resume", str(first),
    ])
    assert code == 0
    _, step = load_checkpoint(second)
    assert step == 6


def test_train_determinism(clean_dir, tmp_path):
    data = make_dataset(clean_dir, tmp_path)
    cfg = write_cfg(tmp_path, steps=5, batch_size=2, crop_size=16, seed=9, lr0=1e-3)
    a, b = tmp_path / "a.iatc", tmp_path / "b.iatc"
    for out in (a, b):
        assert main([
            "train", "--data", str(data), "--config", str(cfg), "--out", str(out)
        ]) == 0
    assert a.read_bytes() == b.read_bytes()


# ---------------------------------------------------------------------------
# eval


def test_eval_targets_against_themselves(clean_dir, tmp_path, capsys):
    data = make_dataset(clean_dir, tmp_path)
    # rebuild pairs where input == target
    pairs = tmp_path / "selfpairs"
    pairs.mkdir()
    for i, target in enumerate(sorted(data.glob("target_*.png"))):
        buf = target.read_bytes()
        (pairs / f"input_{i:05d}.png").write_bytes(buf)
        (pairs / f"target_{i:05d}.png").write_bytes(buf)
    ckpt = tmp_path / "identity.iatc"
    save_checkpoint(iat_init(IATConfig(**SMALL), rng=philox(0)), ckpt)
    csv = tmp_path / "eval.csv"
    code = main(["eval", "--checkpoint", str(ckpt), "--pairs", str(pairs), "--csv", str(csv)])
    assert code == 0
    lines = csv.read_text().strip().split("\n")
    assert len(lines) == 3 + 2  # header + 3 pairs + mean
    assert lines[0] == "image,psnr,ssim"
    mean = lines[-1].split(",")
    assert mean[0] == "mean"
    assert float(mean[1]) == pytest.approx(99.0)
    assert float(mean[2]) == pytest.approx(1.0, abs=1e-6)


def test_eval_unpaired_files_skipped(clean_dir, identity_ckpt, tmp_path, capsys):
    data = make_dataset(clean_dir, tmp_path)
    some_target = next(iter(data.glob("target_00001*")))
    some_target.unlink()
    code = main(["eval", "--checkpoint", str(identity_ckpt), "--pairs", str(data)])
    assert code == 0
    assert "no matching target" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# info


def test_info_default_config_budget(tmp_path, capsys):
    cfg = tmp_path / "default.json"
    cfg.write_text("{}")
    assert main(["info", "--config", str(cfg)]) == 0
    out = capsys.readouterr().out
    total = int(out.split("params[total]: ")[1].split("\n")[0])
    assert 80_000 <= total <= 100_000


def test_info_resolution_scaling(tmp_path, capsys):
    cfg = tmp_path / "default.json"
    cfg.write_text("{}")
    locals_ = []
    for res in ("256x256", "400x600"):
        main(["info", "--config", str(cfg), "--resolution", res])
        out = capsys.readouterr().out
        locals_.append(float(out.split("local ")[1].split(",")[0]))
    ratio = locals_[1] / locals_[0]
    # exactness is asserted at API level; the CLI prints 3 decimals
    assert ratio == pytest.approx((400 * 600) / (256 * 256), rel=1e-2)


def test_info_requires_exactly_one_source(tmp_path, identity_ckpt):
    cfg = tmp_path / "c.json"
    cfg.write_text("{}")
    assert main(["info"]) == 1
    assert main(["info", "--config", str(cfg), "--checkpoint", str(identity_ckpt)]) == 1


def test_info_malformed_checkpoint(tmp_path):
    bad = tmp_path / "bad.iatc"
    bad.write_bytes(b"IATC" + b"\x00" * 40)
    assert main(["info", "--checkpoint", str(bad)]) == 2


def test_unknown_flag_is_usage_error(identity_ckpt, tmp_path):
    with pytest.raises(SystemExit) as exc_info:
        main([
            "enhance", "--checkpoint", str(identity_ckpt),
            "--input", "x", "--output", "y", "--wat",
        ])
    assert exc_info.value.code == 1


def test_unknown_config_key_rejected(clean_dir, tmp_path):
    data = make_dataset(clean_dir, tmp_path)
    cfg = tmp_path / "c.json"
    cfg.write_text('{"channles": 8}')  # typo must not be ignored
    code = main(["train", "--data", str(data), "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 1
