import numpy as np
import pytest

from seqssl.errors import ValidationError
from seqssl.model_core import ModelSpec, build_model, checkpoint_from_model
from seqssl.report import (EmbeddingSet, confusion_matrix, emit_table, evaluate, evaluate_predictions,
                           extract_embeddings, majority_vote_accuracy, pca_2d, project_2d, reference_accuracy,
                           render_plot, render_table, silhouette_by_label)
from seqssl.trainer import CellResult, GridSpec, RunGrid, fraction_label

from oracles import silhouette_cosine

SPEC = ModelSpec("resnet_tiny")


def full_grid(title="SimSiam", seed=0):
    spec = GridSpec.batch_sweep()
    rows = [fraction_label(f) for f in spec.fractions]
    grid = RunGrid(title, rows, spec.column_labels)
    rng = np.random.default_rng(seed)
    for r in rows:
        for c in spec.column_labels:
            grid.cells[(r, c)] = CellResult(f"{r}__{c}", "done", float(rng.uniform(0.5, 1.0)))
    return grid


def test_confusion_and_recall():
    res = evaluate_predictions([0, 0, 1, 2, 2, 2], [0, 1, 1, 2, 2, 0])
    assert res.accuracy == pytest.approx(4 / 6)
    assert res.confusion[0].tolist()[:3] == [1, 1, 0]
    assert res.confusion.sum() == 6
    assert res.per_class_recall[:3] == [0.5, 1.0, pytest.approx(2 / 3)]
    assert res.per_class_recall[3:] == [None] * 6
    assert confusion_matrix([8], [8])[8, 8] == 1


def test_majority_vote_ties_go_to_lowest_class():
    # study a: votes 2 vs 1 tie with one each -> class 1 wins; study b: clear majority
    assert majority_vote_accuracy([1, 1, 3, 3, 3], [2, 1, 3, 3, 0], ["a", "a", "b", "b", "b"]) == 1.0
    assert majority_vote_accuracy([2, 2], [2, 1], ["a", "a"]) == 0.0


def test_evaluate_uses_test_split(small_table):
    model = build_model(SPEC, 0)
    with pytest.raises(ValidationError):
        evaluate(checkpoint_from_model(model, "pretrained", 1, 0), small_table)
    res = evaluate(checkpoint_from_model(model, "finetuned", 1, 0), small_table)
    assert res.n_samples == len(small_table.split("test"))
    assert 0.0 <= res.accuracy <= 1.0
    d = res.to_dict()
    assert set(d) >= {"accuracy", "confusion", "per_class_recall", "n_samples"}


def test_reference_values():
    assert reference_accuracy("simsiam", "50%", "256") == 0.967
    assert reference_accuracy("simclr", "1%", "512") == 0.8884
    assert reference_accuracy("resolution", "5%", "128_256") == 0.936
    assert reference_accuracy("simsiam", "50%", "8") is None


# tables --------------------------------------------------------------------


def test_table_one_structure_and_determinism(tmp_path):
    grid = full_grid()
    text = render_table(grid)
    lines = text.splitlines()
    assert lines[0] == "SimSiam,64,128,256,512,1024,2048"
    assert [line.split(",")[0] for line in lines[1:]] == ["0.5%", "1%", "5%", "50%", "100%"]
    assert all(len(line.split(",")) == 7 for line in lines)
    a = emit_table(grid, tmp_path / "a.csv").read_bytes()
    b = emit_table(full_grid(), tmp_path / "b.csv").read_bytes()
    assert a == b == text.encode()


def test_failed_and_markdown():
    grid = full_grid()
    grid.cells[("1%", "128")] = CellResult("x", "failed", error="boom")
    del grid.cells[("5%", "64")]
    md = render_table(grid, "markdown").splitlines()
    assert md[0].startswith("| SimSiam | 64 |") and md[1].startswith("|---|")
    assert "| failed |" in md[3]
    assert md[4].startswith("| 5% |  |")
    with pytest.raises(ValidationError):
        render_table(grid, "html")


def test_grid_roundtrip():
    grid = full_grid()
    back = RunGrid.from_dict(grid.to_dict())
    assert render_table(back) == render_table(grid)
    assert back.as_array().shape == (5, 6)


# embeddings ----------------------------------------------------------------


def test_pca_matches_covariance_eigenvectors():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(60, 5)) * np.array([5.0, 3.0, 1.0, 0.5, 0.1])
    scores = pca_2d(x)
    centered = x - x.mean(0)
    vals, vecs = np.linalg.eigh(np.cov(centered.T))
    top = vecs[:, ::-1][:, :2]
    ref = centered @ top
    for k in range(2):
        assert np.allclose(np.abs(scores[:, k]), np.abs(ref[:, k]), atol=1e-8)
    # sign convention makes the result invariant to flipping the input basis
    assert np.allclose(pca_2d(x * np.array([-1, 1, 1, 1, 1])) [:, 1], scores[:, 1])


def test_project_errors_and_tsne():
    with pytest.raises(ValidationError):
        project_2d(EmbeddingSet(np.zeros((1, 3)), np.zeros(1, dtype=int)))
    rng = np.random.default_rng(1)
    emb = EmbeddingSet(rng.normal(size=(20, 4)), np.arange(20) % 3)
    out = project_2d(emb, "tsne", seed=0)
    assert out.coords2d.shape == (20, 2) and out.method == "tsne"
    with pytest.raises(ValidationError):
        project_2d(emb, "umap")


def test_silhouette_matches_oracle():
    rng = np.random.default_rng(2)
    labels = np.repeat(np.arange(4), 8)
    x = rng.normal(size=(32, 6)) + 2.0 * np.eye(6)[labels]
    assert silhouette_by_label(EmbeddingSet(x, labels)) == pytest.approx(silhouette_cosine(x, labels), abs=1e-9)


def test_plots_written(tmp_path, small_table):
    ckpt = checkpoint_from_model(build_model(SPEC, 0), "pretrained", 0, 0)
    emb = project_2d(extract_embeddings(ckpt, small_table.split("test")))
    assert emb.vectors.shape[1] == 128
    for ext in ("png", "svg"):
        path = render_plot(emb, tmp_path / f"e.{ext}", "init")
        assert path.stat().st_size > 0
    assert (tmp_path / "e.png").read_bytes()[:4] == b"\x89PNG"
