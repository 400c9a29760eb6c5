from pathlib import Path

import pytest

from crfrefine.utils import find_mask, mask_output_path, prob_output_paths, try_each


def test_prob_output_paths():
    prob, preview = prob_output_paths("run/prob", "case0003", 7)
    assert prob == Path("run/prob/case0003/0007.dten")
    assert preview == Path("run/prob/case0003/0007.prob.pgm")


def test_mask_output_path_by_label_count():
    assert mask_output_path("masks", "c", 0) == Path("masks/c/0000.pgm")
    assert mask_output_path("masks", "c", 0, n_labels=3) == Path("masks/c/0000.dten")


def test_find_mask_prefers_pgm(tmp_path):
    (tmp_path / "c").mkdir()
    (tmp_path / "c" / "0001.dten").write_bytes(b"")
    assert find_mask(str(tmp_path), "c", 1) == tmp_path / "c" / "0001.dten"
    (tmp_path / "c" / "0001.pgm").write_bytes(b"")
    assert find_mask(str(tmp_path), "c", 1) == tmp_path / "c" / "0001.pgm"
    with pytest.raises(FileNotFoundError, match="slice 2"):
        find_mask(str(tmp_path), "c", 2)


def test_try_each_collects_failures(caplog):
    def invert(x):
        return 1 / x

    results, failures = try_each(invert, [1, 0, 4], threads=2, describe=lambda x: f"item {x}")
    assert results == [1.0, 0.25]
    assert failures == ["item 0: division by zero"]
    assert "Failed item 0" in caplog.text
