import pytest
import torch

from conftest import tiny_config
from patchlm.checkpoint import load_checkpoint, read_header, save_checkpoint
from patchlm.modeling import build_vlm


def test_checkpoint_round_trip(tmp_path):
    model = build_vlm(tiny_config(), seed=3)
    path = tmp_path / "m.bin"
    save_checkpoint(path, model, meta={"config_hash": "abc", "seed": 3})
    back, header = load_checkpoint(path)
    assert header["meta"] == {"config_hash": "abc", "seed": 3}
    for (na, pa), (nb, pb) in zip(
        model.state_dict().items(), back.state_dict().items()
    ):
        assert na == nb
        assert torch.equal(pa, pb)


def test_checkpoint_bytes_are_stable(tmp_path):
    model = build_vlm(tiny_config(), seed=3)
    save_checkpoint(tmp_path / "a.bin", model, meta={"seed": 3})
    save_checkpoint(tmp_path / "b.bin", model, meta={"seed": 3})
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_read_header_without_loading(tmp_path):
    model = build_vlm(tiny_config(), seed=0)
    path = tmp_path / "m.bin"
    save_checkpoint(path, model)
    header = read_header(path)
    assert header["format_version"] == 1
    assert header["config"]["lm_dim"] == model.cfg.lm_dim
    assert header["tokenizer"]["vocab_size"] == 259
    names = {p["name"] for p in header["params"]}
    assert names == set(model.state_dict().keys())


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        read_header(path)
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_loaded_model_behaves_identically(tmp_path):
    import numpy as np

    from patchlm.images import RawImage

    model = build_vlm(tiny_config(), seed=1)
    path = tmp_path / "m.bin"
    save_checkpoint(path, model)
    back, _ = load_checkpoint(path)
    rng = np.random.default_rng(0)
    img = RawImage(rng.integers(0, 256, size=(48, 48, 3), dtype=np.uint8))
    a = model.generate_greedy(img, "Describe.", max_new=8)
    b = back.generate_greedy(img, "Describe.", max_new=8)
    assert a.token_ids == b.token_ids
