"""Per-iteration records kept by the optimizers."""
from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field

import numpy as np

SGD_COLUMNS = ("step", "epoch", "wall_ms", "grad_norm", "sim_nll", "mode", "S", "B")
EM_COLUMNS = ("iter", "surrogate_obj", "wall_ms")


def substream(seed: int, name: str) -> np.random.Generator:
    """Named random stream derived from a master seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


@dataclass
class FitTrace:
    columns: tuple
    records: list = field(default_factory=list)
    diverged: bool = False
    warnings: dict = field(default_factory=dict)

    def add(self, **rec):
        self.records.append(rec)

    def warn(self, key, count=1):
        self.warnings[key] = self.warnings.get(key, 0) + int(count)

    def column(self, name):
        return np.array([np.nan if r.get(name) is None else r[name] for r in self.records],
                        dtype=float)

    def evaluated(self):
        """Records carrying a simulated NLL value."""
        return [r for r in self.records if r.get("sim_nll") is not None]

    def to_csv(self, path, timing: bool = True):
        """Write the trace; ``timing=False`` blanks ``wall_ms`` so the file is reproducible."""
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(self.columns)
            for r in self.records:
                row = []
                for c in self.columns:
                    v = r.get(c)
                    if c == "wall_ms" and not timing:
                        v = None
                    if v is None:
                        row.append("")
                    elif isinstance(v, float):
                        row.append(repr(v))
                    else:
                        row.append(str(v))
                wr.writerow(row)

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            cols = tuple(next(rd))
            tr = cls(cols)
            for row in rd:
                rec = {}
                for c, v in zip(cols, row):
                    if v == "":
                        rec[c] = None
                    else:
                        try:
                            rec[c] = int(v)
                        except ValueError:
                            try:
                                rec[c] = float(v)
                            except ValueError:
                                rec[c] = v
                tr.records.append(rec)
        return tr
