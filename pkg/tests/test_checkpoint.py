import json

import numpy as np
import pytest

from normforge.checkpoint import FORMAT, VERSION, load_checkpoint, save_checkpoint
from normforge.config import dump_config, preset
from normforge.model import ModelConfig, Transformer


def test_bit_exact_roundtrip(tmp_path):
    cfg = ModelConfig(d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1)
    m = Transformer(cfg, 30, rng=np.random.default_rng(3))
    m_state = {k: np.random.default_rng(1).standard_normal(p.data.shape) for k, p in m.params.items()}
    meta = {"config": dump_config(preset("toy-copy")), "step": 17}
    save_checkpoint(tmp_path / "a.npz", meta, m.params, adam_m=m_state, adam_v=m_state,
                    arrays={"target_mask": np.array([True, False])})
    ck = load_checkpoint(tmp_path / "a.npz")
    assert set(ck["params"]) == set(m.params)
    for k, p in m.params.items():
        assert ck["params"][k].tobytes() == p.data.tobytes()
        assert ck["adam_m"][k].tobytes() == m_state[k].tobytes()
    assert ck["meta"]["step"] == 17 and ck["meta"]["version"] == VERSION
    assert ck["meta"]["config"] == meta["config"]
    assert ck["arrays"]["target_mask"].tolist() == [True, False]


def test_special_values_survive(tmp_path):
    a = np.array([0.1, -0.0, 1e-308, np.nextafter(1.0, 2.0), np.inf])
    save_checkpoint(tmp_path / "s.npz", {}, {"x": a})
    assert load_checkpoint(tmp_path / "s.npz")["params"]["x"].tobytes() == a.tobytes()


def _rewrite_meta(src, dst, **changes):
    with np.load(src) as z:
        payload = {k: z[k] for k in z.files}
    meta = json.loads(str(payload["__meta__"]))
    meta.update(changes)
    payload["__meta__"] = np.array(json.dumps(meta))
    np.savez(dst, **payload)


def test_version_and_format_checked(tmp_path):
    save_checkpoint(tmp_path / "ok.npz", {}, {"x": np.ones(2)})
    _rewrite_meta(tmp_path / "ok.npz", tmp_path / "v.npz", version=VERSION + 1)
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(tmp_path / "v.npz")
    _rewrite_meta(tmp_path / "ok.npz", tmp_path / "f.npz", format="other")
    with pytest.raises(ValueError, match="not a normforge"):
        load_checkpoint(tmp_path / "f.npz")
    assert FORMAT == "normforge-ckpt"


def test_no_temp_file_left(tmp_path):
    save_checkpoint(tmp_path / "sub" / "c.npz", {}, {"x": np.zeros(1)})
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["c.npz"]
