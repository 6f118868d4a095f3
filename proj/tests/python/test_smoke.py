import math
import os
from pathlib import Path

import pytest

import akd

CONFIGS = Path(os.environ.get("AKD_CONFIG_DIR", Path(__file__).resolve().parents[2] / "configs"))
FIXTURES = Path(__file__).resolve().parents[1] / "fixtures"


def test_adaptive_temperature():
    assert akd.adaptive_temperature([0.25] * 4) == 0.25
    assert akd.adaptive_temperature([0.7, 0.2, 0.1]) == pytest.approx(0.4 / 3, abs=1e-12)


def test_contribution_weights_prefer_low_perplexity():
    out = akd.contribution_weights([2.0, 4.0, 8.0])
    w = out["weights"]
    assert sum(w) == pytest.approx(1.0, abs=1e-12)
    assert w[0] > w[1] > w[2]
    flat = akd.contribution_weights([2.0, 4.0, 8.0], temperature="none")["weights"]
    assert flat[0] < w[0]
    with pytest.raises(akd.ConfigError):
        akd.contribution_weights([1.0], temperature="warm")


def test_smoothing_converges():
    seq = akd.smooth_weights([[0.9, 0.1]] * 60)
    assert seq[0][0] < 0.9
    assert seq[-1][0] == pytest.approx(0.9, abs=1e-6)


def test_lambda2_schedule():
    assert akd.lambda2_schedule(0, 100) == 0.5
    assert akd.lambda2_schedule(100, 100) == 3.0
    assert akd.lambda2_schedule(50, 100) == pytest.approx(1.75)


def test_bleu_fixture():
    hyp = (FIXTURES / "bleu.hyp").read_text().splitlines()
    ref = (FIXTURES / "bleu.ref").read_text().splitlines()
    assert akd.corpus_bleu(hyp, ref) == pytest.approx(29.125232883490188, abs=1e-9)
    assert akd.corpus_bleu(ref, ref) == pytest.approx(100.0)
    with pytest.raises(akd.ContractError):
        akd.corpus_bleu(hyp, ref[:1])


def test_config_and_data(tmp_path):
    cfg = akd.load_config(str(CONFIGS / "tiny.jsonc"))
    assert len(cfg["hash"]) == 12
    assert '"name"' in cfg["json"]
    size = akd.gen_data(str(CONFIGS / "tiny.jsonc"), str(tmp_path / "data"))
    assert size > 4
    assert (tmp_path / "data" / "vocab.txt").exists()
    with pytest.raises(akd.ConfigError):
        akd.load_config(str(tmp_path / "missing.jsonc"))


def test_tiny_pipeline(tmp_path):
    rows = akd.run_pipeline(str(CONFIGS / "tiny.jsonc"), str(tmp_path))
    systems = {r["system"] for r in rows}
    assert {"individual", "adaptive-kd"} <= systems
    assert all(0.0 <= r["bleu"] <= 100.0 and math.isfinite(r["test_ppl"]) for r in rows)
    run_dir = Path(rows[0]["run_dir"])
    info = akd.model_info(str(run_dir / "students" / "adaptive-kd.akdm"))
    assert info["hidden_size"] == 8
    n = akd.export_trace(str(run_dir / "students" / "adaptive-kd.trace.csv"), str(tmp_path / "plot"))
    assert n > 0 and n % 2 == 0
