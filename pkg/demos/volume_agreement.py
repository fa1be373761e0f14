"""
Do predicted lesion volumes agree with the truth?
=================================================

Paired predicted and actual volumes go through the signed-rank test and
Pearson correlation, then into a scatter and a box plot.
"""

import numpy as np

from strokeseg.report import boxplot_svg, scatter_svg
from strokeseg.stats import PairedVolumes, stats_table, volume_report, wilcoxon_differences

rng = np.random.default_rng(0)
actual = rng.lognormal(mean=7.0, sigma=1.0, size=20)

# One model that tracks the truth, one that overestimates small lesions.
faithful = actual * rng.normal(1.0, 0.1, size=20)
inflated = actual + 800.0 * rng.uniform(0.5, 1.5, size=20)

ids = [f"sub-{i:04d}" for i in range(20)]
reports = [volume_report("faithful", PairedVolumes(ids, actual, faithful)),
           volume_report("inflated", PairedVolumes(ids, actual, inflated))]
print(stats_table(reports))

# With 25 or fewer nonzero differences the p-value comes from the exact
# null distribution; above that a tie-corrected normal approximation is used.
d = inflated - actual
print("exact:", wilcoxon_differences(d[:12]).p_value, wilcoxon_differences(d[:12]).method)
print("large n:", wilcoxon_differences(np.tile(d, 2)).method)

with open("scatter.svg", "w") as fh:
    fh.write(scatter_svg(reports))
with open("boxplot.svg", "w") as fh:
    fh.write(boxplot_svg(reports))
print("wrote scatter.svg and boxplot.svg")
