import json
import re
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from hybridmim.cli import main
from hybridmim.data import PhantomSpec, generate_phantom, read_volume, write_volume
from hybridmim.pretrain import read_metrics

SMALL = """
total_steps: 10
checkpoint_every: 5
grid: {volume_shape: [16, 16, 16], sub_volume_size: 8, patch_size: 4}
model: {base_width: 2, max_width: 4, projection_dim: 4}
data: {n_volumes: 4, phantom: {volume_shape: [16, 16, 16], axis_range: [2, 4]}}
"""

SMALL_FT = """
epochs: 1
grid: {volume_shape: [16, 16, 16], sub_volume_size: 8, patch_size: 4}
model: {base_width: 2, max_width: 4, projection_dim: 4}
data: {n_train: 2, n_val: 2, phantom: {volume_shape: [16, 16, 16], axis_range: [2, 4]}}
"""


@pytest.fixture
def configs(tmp_path):
    (tmp_path / "pre.yaml").write_text(SMALL)
    (tmp_path / "ft.yaml").write_text(SMALL_FT)
    return tmp_path


def test_missing_config_exit_2(tmp_path, capsys):
    assert main(["pretrain", "--config", str(tmp_path / "absent.yaml")]) == 2
    assert "absent.yaml" in capsys.readouterr().err


def test_unknown_key_exit_2(configs, capsys):
    code = main(["pretrain", "--config", str(configs / "pre.yaml"), "--override", "weights.lambda=1",
                 "--out-dir", str(configs / "o")])
    assert code == 2 and "weights.lambda" in capsys.readouterr().err


def test_pretrain_ten_steps(configs):
    out = configs / "run"
    assert main(["pretrain", "--config", str(configs / "pre.yaml"), "--out-dir", str(out),
                 "--override", "mask_ratio=1.0"]) == 0
    assert len(read_metrics(out / "metrics.csv")) == 10
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["config"]["mask_ratio"] == 1.0
    assert manifest["finished"] is not None
    for path in manifest["artifacts"]["checkpoints"] + [manifest["artifacts"]["metrics_csv"]]:
        assert (out / path.rsplit("/", 1)[-1]).exists()


def test_rerun_from_manifest_reproduces(configs):
    a, b = configs / "a", configs / "b"
    assert main(["pretrain", "--config", str(configs / "pre.yaml"), "--out-dir", str(a), "--steps", "3"]) == 0
    assert main(["pretrain", "--config", str(a / "run_manifest.json"), "--out-dir", str(b)]) == 0
    strip = lambda p: [{k: v for k, v in r.items() if k != "step_ms"} for r in read_metrics(p)]  # noqa: E731
    assert strip(a / "metrics.csv") == strip(b / "metrics.csv")


def test_out_dir_from_environment(configs, monkeypatch):
    monkeypatch.setenv("HMIM_OUT_DIR", str(configs / "env"))
    assert main(["pretrain", "--config", str(configs / "pre.yaml"), "--steps", "1"]) == 0
    assert (configs / "env" / "metrics.csv").exists()


def test_resume_missing_checkpoint(configs):
    assert main(["pretrain", "--config", str(configs / "pre.yaml"), "--resume", str(configs / "x.hmck"),
                 "--out-dir", str(configs / "o")]) == 2


def test_finetune_scratch_and_repeatability(configs, capsys):
    args = ["finetune", "--config", str(configs / "ft.yaml"), "--init", "scratch"]
    assert main(args + ["--out-dir", str(configs / "f1")]) == 0
    assert "mean" in capsys.readouterr().out
    assert main(args + ["--out-dir", str(configs / "f2")]) == 0
    a = json.loads((configs / "f1" / "summary.json").read_text())
    b = json.loads((configs / "f2" / "summary.json").read_text())
    assert a == b


def test_finetune_from_pretrained(configs):
    assert main(["pretrain", "--config", str(configs / "pre.yaml"), "--steps", "2",
                 "--out-dir", str(configs / "p")]) == 0
    assert main(["finetune", "--config", str(configs / "ft.yaml"), "--init",
                 str(configs / "p" / "step_000002.hmck"), "--out-dir", str(configs / "f")]) == 0


def test_finetune_bad_init(configs):
    assert main(["finetune", "--config", str(configs / "ft.yaml"), "--init", str(configs / "nope.hmck"),
                 "--out-dir", str(configs / "f")]) == 2


# -- mask preview ------------------------------------------------------------------------------

@pytest.fixture
def volume64(tmp_path):
    img, _ = generate_phantom(PhantomSpec((64, 64, 64), seed=1))
    path = tmp_path / "v.hmim"
    write_volume(path, img)
    return path


def test_mask_preview_ratio_zero_is_identity(volume64, tmp_path):
    out = tmp_path / "m0.hmim"
    assert main(["mask-preview", str(volume64), "--sub-volume", "32", "--ratio", "0", "--out", str(out)]) == 0
    np.testing.assert_array_equal(read_volume(out), read_volume(volume64))


def test_mask_preview_counts_blocks(volume64, tmp_path):
    out = tmp_path / "m.hmim"
    assert main(["mask-preview", str(volume64), "--sub-volume", "32", "--ratio", "0.4", "--out", str(out)]) == 0
    mask = read_volume(tmp_path / "m_mask.hmim")[0].astype(bool)
    blocks = mask.reshape(4, 16, 4, 16, 4, 16).transpose(0, 2, 4, 1, 3, 5).reshape(64, -1)
    assert np.all(blocks.all(axis=1) | ~blocks.any(axis=1))  # each block fully on or off
    assert blocks.all(axis=1).sum() == 26
    assert (tmp_path / "m_preview.png").stat().st_size > 0


def test_mask_preview_same_seed_same_files(volume64, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name / "m.hmim"
        assert main(["mask-preview", str(volume64), "--sub-volume", "32", "--seed", "3", "--out", str(out)]) == 0
        outs.append(out.parent)
    for f in ("m.hmim", "m_mask.hmim", "m_plan.bin", "m_preview.png"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()


def test_mask_preview_bad_grid(volume64, tmp_path):
    assert main(["mask-preview", str(volume64), "--sub-volume", "24", "--out", str(tmp_path / "m.hmim")]) == 2


# -- plots -------------------------------------------------------------------------------------------

def _write_csv(path, n, col="loss_total"):
    lines = [f"step,{col}"] + [f"{i + 1},{1.0 / (i + 1)}" for i in range(n)]
    path.write_text("\n".join(lines) + "\n")


def _svg_lines(path):
    root = ET.parse(path).getroot()
    ns = {"s": "http://www.w3.org/2000/svg"}
    lines = []
    for g in root.iter("{http://www.w3.org/2000/svg}g"):
        if re.fullmatch(r"line2d_\d+", g.get("id", "")):
            for p in g.findall("s:path", ns):
                d = p.get("d", "")
                lines.append(len(re.findall(r"[ML]", d)))
    texts = ["".join(t.itertext()).strip() for t in root.iter("{http://www.w3.org/2000/svg}text")]
    return lines, texts


def test_plot_empty_csv_exit_2(tmp_path):
    (tmp_path / "e.csv").write_text("step,loss_total\n")
    assert main(["plot", str(tmp_path / "e.csv"), "--out", str(tmp_path / "e.svg")]) == 2


def test_plot_single_series_has_ten_points(tmp_path):
    _write_csv(tmp_path / "run.csv", 10)
    assert main(["plot", str(tmp_path / "run.csv"), "--out", str(tmp_path / "p.svg")]) == 0
    lines, _ = _svg_lines(tmp_path / "p.svg")
    assert 10 in lines and lines.count(10) == 1


def test_plot_overlay_legend_uses_stems(tmp_path):
    _write_csv(tmp_path / "pretrained.csv", 5)
    _write_csv(tmp_path / "scratch.csv", 5)
    assert main(["plot", str(tmp_path / "pretrained.csv"), str(tmp_path / "scratch.csv"),
                 "--out", str(tmp_path / "p.svg")]) == 0
    _, texts = _svg_lines(tmp_path / "p.svg")
    assert "pretrained" in texts and "scratch" in texts


def test_plot_unknown_column(tmp_path):
    _write_csv(tmp_path / "run.csv", 3)
    assert main(["plot", str(tmp_path / "run.csv"), "--columns", "nope", "--out", str(tmp_path / "p.svg")]) == 2


def test_generate_writes_manifest(tmp_path):
    assert main(["generate", "--out-dir", str(tmp_path / "g"), "--count", "3", "--val-count", "1",
                 "--shape", "32", "32", "32"]) == 0
    text = (tmp_path / "g" / "manifest.csv").read_text().splitlines()
    assert len(text) == 3 and text[-1].endswith(",val,lab_0002.hmim")
