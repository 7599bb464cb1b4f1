"""Root and branch-replay relaxation values across the four formulations.

Classifies 1- and 3-variable orientation scripts on complete m=4 instances
by whether their transitive closure orients extra pairs, and reports how
often the relaxation values of LN, LO, CP and TO coincide in each class.
"""

import argparse
from itertools import combinations, product

import numpy as np

from dagmiqp import (FormulationSpec, assign_weights, build, complete_superstructure,
                     estimate_big_m, find_cycle, random_dag, sample_sem)
from dagmiqp.bnb import replay_branching, root_relaxation_value
from dagmiqp.model import orientation_fixings
from dagmiqp.oracle import enumerate_orderings

KINDS = (("LN", {}), ("LO", {}), ("CP", {"cp_static_triangles": True}), ("TO", {}))


def script_class(script):
    arcs = {a if v else a[::-1] for a, v in script}
    if find_cycle((4, arcs)) is not None:
        return "cyclic"
    extra = any(b == c and a != d and (a, d) not in arcs for a, b in arcs for c, d in arcs)
    return "implies more" if extra else "closed"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(5)))
    ap.add_argument("--lam", type=float, default=0.1)
    args = ap.parse_args()
    ss = complete_superstructure(4)
    pairs = ss.sorted_edges()
    tally = {}
    for penalty in ("L0", "L1"):
        for seed in args.seeds:
            dag = random_dag(4, 2, seed)
            data = sample_sem(assign_weights(dag, seed=seed), 100, seed=seed)
            ref = enumerate_orderings(data, ss, args.lam, penalty)
            est = estimate_big_m(data, ss, args.lam, penalty)
            need = 2 * max((abs(v) for v in ref.dag.beta.values()), default=0.0)
            M = max(est, need)
            models = {k: build(FormulationSpec(k, penalty, ss, args.lam, M, **o), data)
                      for k, o in KINDS}
            roots = [root_relaxation_value(mod) for mod in models.values()]
            print(f"{penalty} seed {seed}: estimate {est:.3f} vs 2max|b*| {need:.3f}, "
                  f"root spread {max(roots) - min(roots):.1e}")
            scripts = [((p, v),) for p in pairs for v in (0, 1)]
            scripts += [tuple(zip(c, vs)) for c in combinations(pairs, 3)
                        for vs in product((0, 1), repeat=3)]
            for script in scripts:
                vals = []
                for mod in models.values():
                    fix = {}
                    for arc, v in script:
                        fix.update(orientation_fixings(mod, arc, v))
                    vals.append(replay_branching(mod, fix))
                if any(v is None for v in vals):
                    same = all(v is None for v in vals)
                else:
                    same = max(vals) - min(vals) <= 1e-5
                key = (penalty, len(script), script_class(script))
                hit = tally.setdefault(key, [0, 0])
                hit[0] += same
                hit[1] += 1
    for key in sorted(tally):
        same, total = tally[key]
        print(*key, f"{same}/{total} equal")


if __name__ == "__main__":
    main()
