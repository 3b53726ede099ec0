"""Simulated utilization and stall attribution of the built-in profiles on one SM."""

from gpuattest import experiments as E, vf

# self-modifying profiles reach steady state after one iteration
ITERATIONS = {"exp1": None, "exp2": None, "exp3": 8, "exp4": 1}


def main() -> None:
    results = {}
    for name in sorted(vf.PROFILES):
        r = E.profile_run(name, iterations=ITERATIONS.get(name))
        results[name] = r
        print(f"{name}: utilization {r.utilization:6.2%}  icache share {r.icache_share:6.1%}  "
              f"{r.cycles / r.iterations:,.0f} cycles/iteration  stalls {r.stalls}")
    steady = (results["exp3"].cycles - E.profile_run("exp3", iterations=4).cycles) / 4
    print(f"exp4/exp3 cost per iteration: {results['exp4'].cycles / steady:.1f}x")


if __name__ == "__main__":
    main()
