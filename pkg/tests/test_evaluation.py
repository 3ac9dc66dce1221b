import numpy as np
import pytest

from decoupled_vad.evaluation import (
    ABLATION_ROWS,
    IncompleteReportError,
    MetricResult,
    UndefinedMetricError,
    ablation_report,
    auc,
    average_precision,
    evaluate,
)


def test_auc_examples():
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auc([0.1, 0.2, 0.9, 0.8], [0, 0, 1, 1]) == 1.0
    assert auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2], [1, 1])


def test_ap_examples():
    assert average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert average_precision([0.9, 0.1], [0, 1]) == 0.5
    assert average_precision([0.3, 0.2, 0.1], [1, 1, 1]) == 1.0
    # ties keep input order
    assert average_precision([0.5, 0.5], [0, 1]) == 0.5
    with pytest.raises(UndefinedMetricError):
        average_precision([0.1, 0.2], [0, 0])


def test_evaluate_counts_and_shape_check():
    r = evaluate(np.array([0.1, 0.9, 0.2]), np.array([0, 1, 0]))
    assert (r.n_frames, r.n_positive, r.auc, r.ap) == (3, 1, 1.0, 1.0)
    with pytest.raises(ValueError):
        evaluate([0.1, 0.2], [0])


def test_ablation_report_rows_and_missing():
    results = {r: MetricResult(0.5, 0.5, 10, 5) for r in ABLATION_ROWS}
    table = ablation_report(results)
    assert [row["variant"] for row in table] == list(ABLATION_ROWS)
    del results["no_gmp"], results["unified"]
    with pytest.raises(IncompleteReportError) as info:
        ablation_report(results)
    assert set(info.value.missing) == {"no_gmp", "unified"}
