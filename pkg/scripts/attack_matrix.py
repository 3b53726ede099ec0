"""Detection matrix: every attack variant against one calibrated verifier.

Timing-only by default; pass --functional to also check checksum values
(slow on the full profile).
"""

import argparse
import json

from gpuattest import adversary as A, verifier as V, vf
from gpuattest.device import machine


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--profile", default="exp1", choices=sorted(vf.PROFILES))
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--runs", type=int, default=5)
    ap.add_argument("--calibration-runs", type=int, default=30)
    ap.add_argument("--functional", action="store_true")
    ap.add_argument("--json", action="store_true", help="print JSON instead of a table")
    args = ap.parse_args()

    p = vf.PROFILES[args.profile].with_(num_sms=1, iterations=args.iterations)
    cfg = p.device_config(mem_jitter=250)
    img = vf.build_vf(p)
    state = machine.load_image(img, cfg)
    model = V.calibrate(img, args.calibration_runs, config=cfg, seed=11, state=state)
    slack = int(model.threshold - model.t_avg) + 1
    specs = [A.nop_inject(1), A.AttackSpec("data_substitution", words=(5000,)),
             A.AttackSpec("proxy", latency=slack),
             A.AttackSpec("parallel_takeover", warps=1, spin=2000),
             A.AttackSpec("toctou_swap"), A.AttackSpec("precompute_replay"),
             A.AttackSpec("memcopy_b"), A.AttackSpec("memcopy_c"), A.AttackSpec("memcopy_d")]
    rows = []
    for spec in specs:
        setup = A.apply_attack(img, state, spec)
        ver = V.Verifier(model, V.ChallengeSource(99, 1, p.iterations),
                         expected=lambda ch: vf.checksum_reference(img, ch))
        reps = [A.evaluate(setup, ver, functional=args.functional,
                           jitter_seed=V.jitter_seed_for(3, i)) for i in range(args.runs)]
        rows.append({"variant": spec.variant.value,
                     "detected": sum(r.detected for r in reps), "runs": args.runs,
                     "overhead_cycles": min(r.attacked_cycles - r.honest_cycles for r in reps),
                     "reasons": sorted({r.verdict.reason.value for r in reps})})
    if args.json:
        print(json.dumps({"model": model.to_dict(), "attacks": rows}, indent=2))
        return
    print(f"threshold {model.threshold:.0f} cycles (t_avg {model.t_avg:.0f}, sigma {model.sigma:.1f})")
    for r in rows:
        print(f"{r['variant']:<18} {r['detected']}/{r['runs']}  "
              f"+{r['overhead_cycles']:>9} cycles  {','.join(r['reasons'])}")


if __name__ == "__main__":
    main()
