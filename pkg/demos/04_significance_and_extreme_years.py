"""
Paired tests and extreme years
==============================
"""

from pathlib import Path

import pandas as pd

from vita.evaluation import deviation_pct, paired_t_test, permutation_test, select_extreme_years

fixtures = Path(__file__).resolve().parent.parent / "fixtures"
pairs = pd.read_csv(fixtures / "detailed_r2.csv")
print(pairs)

tt = paired_t_test(pairs.vita_r2, pairs.tbert_r2)
print(f"t={tt.t:.3f}  p={tt.p_two_tailed:.4f}  df={tt.df}")
print("sign-flip p =", permutation_test(pairs.vita_r2, pairs.tbert_r2, iterations=10_000))

# deviation from the trailing 5-year mean
ext = pd.read_csv(fixtures / "extreme_years.csv")
ext["recomputed"] = [round(deviation_pct(y, m), 4) for y, m in zip(ext["yield"], ext.rolling_mean_5y)]
print(ext[["crop", "year", "deviation_pct", "recomputed"]])

# ranking on a toy series with one bad year
series = {2000 + i: v for i, v in enumerate([140, 143, 139, 145, 147, 150, 108, 152, 155, 154])}
for row in select_extreme_years(series, top_n=3):
    print(row.year, round(row.abs_zscore, 2), round(row.deviation_pct, 1))
