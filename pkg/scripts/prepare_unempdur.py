"""Derive data/UnempDur.csv from the Ecdat UnempDur table.

Ecdat ships ``spell`` plus four outcome flags (censor1..censor4).  The
analysis file keeps all 3,343 rows and writes

* ``status`` = 1 for re-employment in any job (censor1/2/3), 0 if still
  jobless (censor4);
* ``status`` missing when no outcome flag is set, or when re-employment
  was observed after week 40 (spell > 20), which lies outside the 21-period
  window;
* spells of subjects still jobless after week 40 truncated to 20, i.e.
  censored at the end of the window.

Ingesting the result with listwise deletion gives 3,210 subjects.

    python scripts/prepare_unempdur.py [raw.csv] [out.csv]
"""
import sys
from pathlib import Path

import numpy as np
import pandas as pd

ROOT = Path(__file__).resolve().parents[1]
WINDOW = 20


def prepare(raw: pd.DataFrame) -> pd.DataFrame:
    flags = raw[["censor1", "censor2", "censor3", "censor4"]]
    event = flags[["censor1", "censor2", "censor3"]].sum(axis=1) > 0
    status = pd.Series(np.where(event, 1.0, 0.0), index=raw.index)
    status[flags.sum(axis=1) == 0] = np.nan
    status[event & (raw.spell > WINDOW)] = np.nan
    spell = raw.spell.where(~((status == 0) & (raw.spell > WINDOW)), WINDOW)
    out = raw[["age", "ui", "reprate", "disrate", "logwage", "tenure"]].copy()
    out.insert(0, "spell", spell)
    out["status"] = status.astype("Int64")
    return out


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    src = Path(argv[0]) if argv else ROOT / "data" / "UnempDur_ecdat.csv"
    dst = Path(argv[1]) if len(argv) > 1 else ROOT / "data" / "UnempDur.csv"
    out = prepare(pd.read_csv(src))
    out.to_csv(dst, index=False)
    print(f"{dst}: {len(out)} rows, {out.status.notna().sum()} complete")


if __name__ == "__main__":
    main()
