"""CSV and text renderings of rebuild results."""
from __future__ import annotations

import csv
import io

PAIR_COLUMNS = ("block_id", "layer_id", "group_id", "pair_rank", "grow_score", "prune_score", "value")
REPORT_COLUMNS = ("block_id", "kind", "e_init", "e_rebuilt", "n_pairs", "n_positive", "n_applied", "alpha")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def pairs_csv(reports) -> str:
    """One row per candidate pair; floats written with ``repr`` so they round-trip."""
    rows = []
    for rep in reports:
        for p in rep.pairs:
            layer = p.grow[0] if p.grow[0] == p.prune[0] else f"{p.grow[0]}/{p.prune[0]}"
            rows.append((rep.block_id, layer, p.group, p.rank, repr(p.grow_score),
                         repr(p.prune_score), repr(p.value)))
    return _csv(PAIR_COLUMNS, rows)


def report_csv(reports) -> str:
    return _csv(REPORT_COLUMNS, [(r.block_id, r.kind, repr(r.e_init), repr(r.e_rebuilt), r.n_pairs,
                                  r.n_positive, r.n_applied, repr(r.alpha)) for r in reports])


def report_table(reports) -> str:
    lines = [f"{'block':>5} {'kind':<9} {'E_init':>14} {'E_rebuilt':>14} {'change':>8} {'applied':>9} {'alpha':>7}"]
    for r in reports:
        change = (r.e_rebuilt - r.e_init) / r.e_init if r.e_init else 0.0
        lines.append(f"{r.block_id:>5} {r.kind:<9} {r.e_init:>14.6g} {r.e_rebuilt:>14.6g} "
                     f"{change:>+8.2%} {r.n_applied:>4}/{r.n_positive:<4} {r.alpha:>7.4f}")
    ti = sum(r.e_init for r in reports)
    tr = sum(r.e_rebuilt for r in reports)
    lines.append(f"{'total':>5} {'':<9} {ti:>14.6g} {tr:>14.6g} {((tr - ti) / ti if ti else 0.0):>+8.2%}")
    return "\n".join(lines)
