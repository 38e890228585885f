import json

import numpy as np
import pytest

from divseed.errors import ConfigError, DataError
from divseed.pipeline import (
    PipelineConfig,
    EvalImage,
    base_with,
    evaluate_images,
    format_ablation_table,
    k_band_analysis,
    make_benchmark,
    run_pipeline,
    run_variant,
    sample_supervision,
    summarize_ablation,
    train_localizers,
)
from divseed.rng import derive_seed
from divseed.sampling import build_supervision_set
from divseed.segmentation import new_segmentation_model, SegConfig

# small but real: big enough for localizers to train, small enough for CI
TINY = PipelineConfig(seed=3, n_train=80, n_test=16, n_classes=2, image_size=32)


@pytest.fixture(scope="module")
def tiny_bench():
    return make_benchmark(TINY)


@pytest.fixture(scope="module")
def tiny_models(tiny_bench):
    results = train_localizers(
        tiny_bench.train_records, [0, 1], TINY.loc_config(), TINY.seed
    )
    return {c: r.model for c, r in results.items()}


# ---------------------------------------------------------------------------
# config


def test_config_round_trip():
    cfg = PipelineConfig(seed=9, k=10, strategy="top_k")
    doc = json.loads(json.dumps(cfg.to_dict()))
    assert PipelineConfig.from_dict(doc) == cfg


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"stratgy": "diverse"})


def test_config_rejects_bad_values_before_work():
    with pytest.raises(ConfigError):
        PipelineConfig(strategy="nonsense")
    with pytest.raises(ConfigError):
        PipelineConfig(pooling="avg")
    with pytest.raises(ConfigError):
        PipelineConfig(k=0)


def test_report_echo_drops_scheduling_fields():
    echo = PipelineConfig().report_echo()
    assert "jobs" not in echo
    assert echo["k"] == 20


def test_full_scale_hyperparameters_reachable():
    """The larger published-style sizes and rates stay expressible."""
    cfg = PipelineConfig(
        loc_hidden=1024,
        loc_lr_schedule=((2, 1e-4), (1, 1e-5)),
        seg_hidden=512,
        seg_lr=1e-6,
    )
    assert cfg.loc_config().hidden == 1024
    assert cfg.loc_config().lr_schedule == ((2, 1e-4), (1, 1e-5))
    assert cfg.seg_config().hidden == 512
    assert PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


# ---------------------------------------------------------------------------
# benchmark and variants


def test_benchmark_shapes(tiny_bench):
    assert len(tiny_bench.train_records) == 80
    assert len(tiny_bench.test_images) == 16
    r = tiny_bench.train_records[0]
    assert r.features.grid.depth == 48
    assert tiny_bench.test_images[0].truth.shape == (8, 8)


def test_run_variant_reports_sane_miou(tiny_bench, tiny_models):
    report, seg, points = run_variant(tiny_bench, tiny_models, TINY)
    assert 0.0 <= report.miou <= 1.0
    assert len(points) > 0
    assert seg.wall_seconds < 60


def test_sample_supervision_jobs_equivalent(tiny_bench, tiny_models):
    seed = derive_seed(TINY.seed, 0x5A3F)
    seq = sample_supervision(
        tiny_bench.train_records, tiny_models, TINY.sampling_config(), seed, jobs=1
    )
    par = sample_supervision(
        tiny_bench.train_records, tiny_models, TINY.sampling_config(), seed, jobs=2
    )
    assert seq == par
    direct = build_supervision_set(
        tiny_bench.train_records, tiny_models, TINY.sampling_config(), seed
    )
    assert seq == direct


def test_train_localizers_jobs_equivalent(tiny_bench):
    a = train_localizers(tiny_bench.train_records, [0, 1], TINY.loc_config(),
                         TINY.seed, jobs=1)
    b = train_localizers(tiny_bench.train_records, [0, 1], TINY.loc_config(),
                         TINY.seed, jobs=2)
    for c in (0, 1):
        for pa, pb in zip(a[c].model.params(), b[c].model.params()):
            assert np.array_equal(pa, pb)


# ---------------------------------------------------------------------------
# evaluation mapping


def test_evaluate_images_maps_grown_universe():
    model = new_segmentation_model([0, 1, 7], in_dim=8, global_dim=4,
                                   config=SegConfig(hidden=4), seed=0)
    for arr in model.params():
        arr[...] = 0.0
    from divseed.tensor import FeatureGrid, Grid, NormState

    feats = FeatureGrid(
        grid=Grid(np.full((2, 2, 4), 0.5, dtype=np.float32)),
        norm_state=NormState.UNIT,
    )
    # truth in the original 2-class space: background label 2
    truth = np.array([[0, 1], [2, 2]])
    images = [EvalImage(image_id="x", features=feats, truth=truth)]
    report, cm = evaluate_images(model, images, truth_background_label=2)
    assert cm.n_labels == 4
    # zeroed model predicts index 0 everywhere
    assert cm.counts[0, 0] == 1 and cm.counts[1, 0] == 1 and cm.counts[3, 0] == 2


def test_evaluate_images_rejects_unknown_truth():
    model = new_segmentation_model([5], in_dim=8, global_dim=4,
                                   config=SegConfig(hidden=4), seed=0)
    from divseed.tensor import FeatureGrid, Grid, NormState

    feats = FeatureGrid(
        grid=Grid(np.full((1, 1, 4), 0.5, dtype=np.float32)),
        norm_state=NormState.UNIT,
    )
    images = [EvalImage(image_id="x", features=feats, truth=np.array([[0]]))]
    with pytest.raises(DataError):
        evaluate_images(model, images, truth_background_label=2)


# ---------------------------------------------------------------------------
# full run on disk


@pytest.mark.slow
def test_run_pipeline_writes_artifacts(tmp_path):
    out = tmp_path / "run"
    summary = run_pipeline(TINY, str(out))
    for rel in ("config.json", "report.json", "summary.json", "points.jsonl"):
        assert (out / rel).exists()
    assert (out / "seg.ckpt" / "meta.json").exists()
    assert (out / "loc" / "class_0" / "meta.json").exists()
    assert (out / "data" / "train" / "manifest.json").exists()
    stage_names = [s["name"] for s in summary["stages"]]
    assert stage_names == ["gen-data", "train-loc", "sample", "train-seg", "eval"]
    assert 0.0 <= summary["report"]["miou"] <= 1.0
    assert summary["artifacts"]  # every artifact hashed
    # report echoes the semantic config
    report = json.loads((out / "report.json").read_text())
    assert report["config"]["n_train"] == 80


@pytest.mark.slow
def test_worker_count_does_not_change_results(tmp_path):
    seq = run_pipeline(TINY, str(tmp_path / "seq"))
    par = run_pipeline(base_with(TINY, {"jobs": 2}), str(tmp_path / "par"))
    assert seq["report"] == par["report"]
    # artifact trees are identical except for the config echo's jobs field
    diff = {
        rel
        for rel in seq["artifacts"]
        if seq["artifacts"][rel] != par["artifacts"].get(rel)
    }
    assert diff <= {"config.json"}


def test_stage_failure_names_the_stage(tmp_path):
    # k larger than the number of grid locations fails in the sample stage
    bad = PipelineConfig(seed=1, n_train=10, n_test=4, n_classes=2,
                         image_size=32, k=200)
    with pytest.raises(DataError, match="stage sample"):
        run_pipeline(bad, str(tmp_path / "fail"))
    # earlier stages' artifacts are retained
    assert (tmp_path / "fail" / "data" / "train" / "manifest.json").exists()


@pytest.mark.slow
def test_default_config_end_to_end_under_ten_minutes(tmp_path):
    import time

    started = time.perf_counter()
    summary = run_pipeline(PipelineConfig(), str(tmp_path / "default"))
    elapsed = time.perf_counter() - started
    assert elapsed < 600.0
    assert 0.0 <= summary["report"]["miou"] <= 1.0


@pytest.mark.slow
def test_run_pipeline_deterministic(tmp_path):
    a = run_pipeline(TINY, str(tmp_path / "a"))
    b = run_pipeline(TINY, str(tmp_path / "b"))
    assert (tmp_path / "a" / "report.json").read_bytes() == (
        tmp_path / "b" / "report.json"
    ).read_bytes()
    assert a["artifacts"] == b["artifacts"]


# ---------------------------------------------------------------------------
# ablation summaries (the slow full grid is exercised in the acceptance suite)


def _fake_rows():
    rows = []
    for k, base_miou in ((5, 0.5), (20, 0.6), (50, 0.56)):
        for seed, delta in ((1, -0.01), (2, 0.0), (3, 0.01)):
            rows.append(
                {
                    "variant": f"k={k}",
                    "overrides": {"k": k},
                    "seed": seed,
                    "miou": base_miou + delta,
                    "per_class_iou": [],
                }
            )
    return rows


def test_summarize_ablation_medians_and_band():
    summary = summarize_ablation(PipelineConfig(), _fake_rows())
    med = {v["variant"]: v["median_miou"] for v in summary["variants"]}
    assert med == {"k=5": 0.5, "k=20": 0.6, "k=50": 0.56}
    band = summary["k_band"]
    assert band["best_k"] == 20
    assert band["within_band"] is True
    assert band["violations"] == []
    table = format_ablation_table(summary)
    assert "k=20" in table and "within band" in table


def test_k_band_flags_violations():
    variants = [
        {"variant": "k=5", "overrides": {"k": 5}, "median_miou": 0.3, "mious": []},
        {"variant": "k=20", "overrides": {"k": 20}, "median_miou": 0.6, "mious": []},
    ]
    band = k_band_analysis(variants)
    assert band["within_band"] is False
    assert band["violations"] == [5]
