import json

import pytest

from _toy import tiny_config, unpaired_sets
from ucl_dehaze.cli import _resolve_config, build_parser, main
from ucl_dehaze.data import load_checkpoint, save_image

TINY = {k: v for k, v in tiny_config().to_dict().items() if k in
        ("crop_size", "base_channels", "n_residual_blocks", "disc_channels", "num_patches", "epochs",
         "decay_start")}


@pytest.fixture
def dataset(tmp_path):
    hazy, clean = unpaired_sets(2, 2, 32, seed=3)
    dirs = {}
    for name, imgs in (("hazy", hazy), ("clean", clean)):
        d = tmp_path / name
        d.mkdir()
        for i, img in enumerate(imgs):
            save_image(d / f"{i}.png", img)
        dirs[name] = d
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    dirs["config"] = cfg
    return dirs


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    hazy, clean = unpaired_sets(2, 2, 32, seed=3)
    for name, imgs in (("hazy", hazy), ("clean", clean)):
        (root / name).mkdir()
        for i, img in enumerate(imgs):
            save_image(root / name / f"{i}.png", img)
    (root / "tiny.json").write_text(json.dumps(TINY))
    code = main(["train", str(root / "hazy"), str(root / "clean"), str(root / "out"),
                 "--config", str(root / "tiny.json"), "--variant", "v2"])
    assert code == 0
    return root


def test_train_outputs(trained):
    out = trained / "out"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["seed"] == 0
    assert manifest["config"]["base_channels"] == 4
    assert (out / "final.ckpt").exists() and (out / "losses.csv").exists()
    assert load_checkpoint(out / "final.ckpt")["config"]["variant"]["use_dual_pc"] is True


def test_infer_is_byte_stable(trained, tmp_path):
    args = [str(trained / "out" / "final.ckpt"), str(trained / "hazy")]
    assert main(["infer", *args, str(tmp_path / "a")]) == 0
    assert main(["infer", *args, str(tmp_path / "b")]) == 0
    for name in ("0.png", "1.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_infer_reports_bad_images(trained, tmp_path):
    inp = tmp_path / "in"
    inp.mkdir()
    (inp / "broken.png").write_bytes(b"garbage")
    code = main(["infer", str(trained / "out" / "final.ckpt"), str(inp), str(tmp_path / "o")])
    assert code == 1
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["failed_items"] == ["broken.png"]


def test_eval(trained, tmp_path, capsys):
    code = main(["eval", str(trained / "hazy"), "--reference-dir", str(trained / "hazy"),
                 "--hazy-dir", str(trained / "hazy"), "--report", str(tmp_path / "rep.csv")])
    assert code == 0
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert rep["means"]["psnr"] == 100.0 and rep["means"]["e"] == 0.0
    assert "psnr" in capsys.readouterr().out


def test_eval_missing_counterpart(trained, tmp_path):
    ref = tmp_path / "ref"
    ref.mkdir()
    save_image(ref / "0.png", unpaired_sets(1, 1, 32)[1][0])
    code = main(["eval", str(trained / "hazy"), "--reference-dir", str(ref), "--report", str(tmp_path / "r")])
    assert code == 1
    rows = json.loads((tmp_path / "r.json").read_text())["rows"]
    assert [r["status"] for r in rows] == ["ok", "skipped: missing reference"]


def test_ablate_all_six(dataset, tmp_path):
    out = tmp_path / "abl"
    code = main(["ablate", str(dataset["hazy"]), str(dataset["clean"]), str(out), "--config", str(dataset["config"]),
                 "--test-hazy", str(dataset["hazy"]), "--test-clean", str(dataset["hazy"])])
    assert code == 0
    table = (out / "ablation.md").read_text().splitlines()
    assert table[0].startswith("| variant | L_ide | Dual-L_PC | L_SCP | Sp-Norm | SC Conv | psnr")
    rows = [line.split(" | ")[:6] for line in table[2:]]
    assert len(rows) == 6
    marks = [r[1:] for r in rows]
    assert [r[0] for r in rows] == ["| Base", "| V1", "| V2", "| V3", "| V4", "| V5"]
    assert marks == [["✓"] * k + ["w/o"] * (5 - k) for k in range(6)]


def test_ablate_interrupted_keeps_completed_rows(dataset, tmp_path, monkeypatch):
    import ucl_dehaze.cli as cli
    real_fit, calls = cli.fit, []

    def flaky_fit(*a, **kw):
        calls.append(1)
        if len(calls) == 4:
            raise KeyboardInterrupt
        return real_fit(*a, **kw)
    monkeypatch.setattr(cli, "fit", flaky_fit)
    out = tmp_path / "abl"
    with pytest.raises(KeyboardInterrupt):
        main(["ablate", str(dataset["hazy"]), str(dataset["clean"]), str(out), "--config", str(dataset["config"])])
    with open(out / "ablation.csv") as fh:
        assert len(fh.read().splitlines()) == 1 + 3


def test_toy_train_log_and_rerun(tmp_path):
    hazy, clean = unpaired_sets(8, 8, 32, seed=4)
    for name, imgs in (("h", hazy), ("c", clean)):
        (tmp_path / name).mkdir()
        for i, img in enumerate(imgs):
            save_image(tmp_path / name / f"{i}.png", img)
    (tmp_path / "cfg.json").write_text(json.dumps(TINY))
    for run in ("a", "b"):
        assert main(["train", str(tmp_path / "h"), str(tmp_path / "c"), str(tmp_path / run),
                     "--config", str(tmp_path / "cfg.json")]) == 0
    log = (tmp_path / "a" / "losses.csv").read_bytes()
    assert len(log.decode().splitlines()) == 1 + 8
    assert log == (tmp_path / "b" / "losses.csv").read_bytes()


def test_infer_odd_size(trained, tmp_path):
    from ucl_dehaze.data import load_image
    inp = tmp_path / "in"
    inp.mkdir()
    for i in range(5):
        save_image(inp / f"img{i}.png", unpaired_sets(1, 1, 50, seed=i)[0][0])
    assert main(["infer", str(trained / "out" / "final.ckpt"), str(inp), str(tmp_path / "o")]) == 0
    outs = sorted(p.name for p in (tmp_path / "o").glob("*.png"))
    assert outs == [f"img{i}.png" for i in range(5)]
    assert load_image(tmp_path / "o" / "img0.png").shape == (50, 50, 3)


def test_infer_bad_checkpoint(tmp_path, trained):
    (tmp_path / "bad.ckpt").write_bytes(b"junk" * 30)
    assert main(["infer", str(tmp_path / "bad.ckpt"), str(trained / "hazy"), str(tmp_path / "o")]) == 2


def test_eval_identical_dirs_and_means(trained, tmp_path):
    assert main(["eval", str(trained / "clean"), "--reference-dir", str(trained / "clean"),
                 "--report", str(tmp_path / "same")]) == 0
    rep = json.loads((tmp_path / "same.json").read_text())
    assert rep["means"]["ssim"] == 1.0 and rep["means"]["ciede2000"] == 0.0 and rep["means"]["psnr"] == 100.0
    assert main(["eval", str(trained / "clean"), "--reference-dir", str(trained / "hazy"),
                 "--report", str(tmp_path / "diff")]) == 0
    rep = json.loads((tmp_path / "diff.json").read_text())
    for name in ("psnr", "ssim", "ciede2000"):
        vals = [r[name] for r in rep["rows"]]
        assert abs(rep["means"][name] - sum(vals) / len(vals)) < 1e-10


def test_help_lists_flags(capsys):
    with pytest.raises(SystemExit):
        main(["train", "--help"])
    out = capsys.readouterr().out
    for flag in ("--seed", "--crop-size", "--epochs", "--device", "--scp-negative", "--variant", "--config"):
        assert flag in out


def test_precedence(dataset, monkeypatch):
    monkeypatch.setenv("UCL_DEHAZE_DEVICE", "meta")
    parser = build_parser()
    args = parser.parse_args(["train", "h", "c", "o", "--config", str(dataset["config"]), "--crop-size", "48"])
    cfg = _resolve_config(args)
    assert cfg.crop_size == 48 and cfg.base_channels == 4 and cfg.device == "meta"
    args = parser.parse_args(["train", "h", "c", "o", "--device", "cpu", "--epochs", "6"])
    cfg = _resolve_config(args)
    assert cfg.device == "cpu" and cfg.epochs == 6 and cfg.decay_start == 3


def test_bad_config_key(dataset, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"lrate": 1}))
    code = main(["train", str(dataset["hazy"]), str(dataset["clean"]), str(tmp_path / "o"), "--config", str(bad)])
    assert code == 2
    assert "unknown config key 'lrate'" in capsys.readouterr().err


def test_empty_domain(tmp_path, dataset):
    empty = tmp_path / "empty"
    empty.mkdir()
    code = main(["train", str(dataset["hazy"]), str(empty), str(tmp_path / "o"), "--config", str(dataset["config"])])
    assert code == 2
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["status"] == "failed"
