"""
Patch-level, scan-level and total accuracy
==========================================

Three accuracy figures describe a test run. The patch-to-scan accuracy
counts every patch equally, the whole-scan accuracy gives every scan the
same weight, and the total accuracy is their product. With unequal scan
sizes the first two disagree, which is the point of reporting both.
"""

import numpy as np

from path24.dataset import OFFICIAL_TEST_COUNTS
from path24.evaluation import PredictionSet, evaluate_predictions, format_report_table

# %%
# A perfect classifier on the official test split scores 1.0 everywhere.
true = np.repeat(np.arange(24), OFFICIAL_TEST_COUNTS)
perfect = evaluate_predictions(PredictionSet.from_labels(true, true))
print("perfect run:", perfect.eta_p, perfect.eta_w, perfect.eta_total)

# %%
# Now misclassify 25 patches. Where the errors land matters: errors on
# scan 4, which has only 15 test patches, hurt the whole-scan accuracy far
# more than errors spread over the large scans.
rng = np.random.default_rng(0)


def with_errors(scan_pool, n_errors=25):
    pred = true.copy()
    candidates = np.flatnonzero(np.isin(true, scan_pool))
    wrong = rng.choice(candidates, n_errors, replace=False)
    pred[wrong] = (true[wrong] + 1) % 24
    return evaluate_predictions(PredictionSet.from_labels(true, pred))


for label, pool in [("spread over all scans", np.arange(24)), ("scans 4 and 18 only", [4, 18])]:
    r = with_errors(pool)
    print(f"{label:24s} eta_p {r.eta_p:.4f}  eta_w {r.eta_w:.4f}  eta_total {r.eta_total:.4f}")

# %%
# The per-class report is built from the confusion matrix, so precision
# and recall are exact fractions before rounding for display.
result = with_errors(np.arange(24))
print(format_report_table(result))
