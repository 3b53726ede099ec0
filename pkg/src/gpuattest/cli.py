"""Command-line experiment runner.

Every subcommand writes a JSON document tagged ``schema: 1`` (to ``--out``
or stdout) and exits 0 only when the assertions it checks hold.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import random
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from . import adversary, experiments, sake, trng, verifier as V, vf
from .device import machine
from .device.config import A100, ConfigError, DeviceConfig, load_profile

SCHEMA = 1
RUN_COLUMNS = ("run", "cycles", "checksum", "verdict", "reason",
               "t_avg", "sigma", "threshold", "utilization")


@dataclass
class ExperimentConfig:
    """Everything a run depends on; see docs/config.md for the JSON form."""

    profile: str = "exp1"
    device_profile: Optional[str] = None
    vf_params: Optional[str] = None
    runs: int = 100
    calibration_runs: int = 100
    jitter: bool = True
    clock: str = "cycles"
    attacks: list = field(default_factory=list)
    out: Optional[str] = None
    csv: Optional[str] = None
    seed: int = 0
    fill_seed: int = 0
    deterministic: bool = False
    num_sms: Optional[int] = None
    iterations: Optional[int] = None
    functional: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if self.calibration_runs < V.MIN_CALIBRATION_RUNS:
            raise ConfigError(f"calibration_runs must be >= {V.MIN_CALIBRATION_RUNS}")
        if self.clock not in ("cycles", "seconds"):
            raise ConfigError("clock must be 'cycles' or 'seconds'")
        if self.vf_params is None and self.profile not in vf.PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; "
                              f"choose from {sorted(vf.PROFILES)}")
        for name in ("device_profile", "vf_params"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise ConfigError(f"{name} file {path} does not exist")
        for a in self.attacks:
            try:
                attack_spec(a)
            except (ValueError, TypeError, KeyError) as e:
                raise ConfigError(f"bad attack entry {a!r}: {e}") from None
        for name in ("num_sms", "iterations"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"{name} must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config {p} does not exist")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {p} is not valid JSON: {e}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def params(self) -> vf.VFParams:
        p = vf.VFParams.from_json(self.vf_params) if self.vf_params else vf.PROFILES[self.profile]
        if self.num_sms is not None:
            p = p.with_(num_sms=self.num_sms)
        if self.iterations is not None:
            p = p.with_(iterations=self.iterations)
        return p

    def device(self) -> DeviceConfig:
        base = load_profile(self.device_profile) if self.device_profile else A100
        cfg = self.params().device_config(base)
        if not self.jitter:
            cfg = cfg.with_(mem_jitter=0)
        elif cfg.mem_jitter == 0:
            cfg = cfg.with_(mem_jitter=250)
        return cfg


def attack_spec(entry) -> adversary.AttackSpec:
    """An attack from a variant name or a dict of AttackSpec fields."""
    if isinstance(entry, str):
        return adversary.AttackSpec(entry)
    return adversary.AttackSpec(**entry)


# ---------------------------------------------------------------- output


def _document(command: str, cfg: ExperimentConfig, result: dict, ok: bool) -> dict:
    doc = {"schema": SCHEMA, "command": command, "ok": ok, "config": cfg.to_dict()}
    doc.update(result)
    return doc


def _emit(doc: dict, out: Optional[str]) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _write_csv(path: Optional[str], rows: list, columns=RUN_COLUMNS) -> None:
    if not path:
        return
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    Path(path).write_text(buf.getvalue())


def _time(cycles: float, cfg: ExperimentConfig, device: DeviceConfig) -> float:
    return cycles / device.clock_hz if cfg.clock == "seconds" else cycles


# ---------------------------------------------------------------- commands


def run_build(cfg: ExperimentConfig, args) -> dict:
    p = cfg.params()
    img = vf.build_vf(p, cfg.fill_seed)
    if args.image:
        Path(args.image).write_bytes(img.to_vfbin())
    if args.dump_asm:
        Path(args.dump_asm).write_text(img.dump_asm())
    return {"ok": True, "params": p.to_dict(), "code_words": img.code_words,
            "entry": img.entry, "body_instructions": p.body_instructions}


def _calibrated(cfg: ExperimentConfig, mode: str = "normal"):
    p = cfg.params()
    device = cfg.device()
    img = vf.build_vf(p, cfg.fill_seed)
    state = machine.load_image(img, device)
    model = V.calibrate(img, cfg.calibration_runs, config=device, seed=cfg.seed, state=state,
                        mode=mode)
    return p, device, img, state, model


def run_calibrate(cfg: ExperimentConfig, args) -> dict:
    _, device, _, _, model = _calibrated(cfg, args.mode)
    rows = [{"run": i, "cycles": c} for i, c in enumerate(model.samples)]
    _write_csv(cfg.csv, rows)
    d = model.to_dict()
    if cfg.clock == "seconds":
        d.update(t_avg=_time(model.t_avg, cfg, device), sigma=_time(model.sigma, cfg, device),
                 threshold=_time(model.threshold, cfg, device))
    return {"ok": True, "model": d, "clock": cfg.clock}


def run_experiment(cfg: ExperimentConfig, min_accept: float = 0.99) -> dict:
    """Calibrate, then judge ``cfg.runs`` fresh honest sessions.

    The CSV has one row per run plus a summary row with the timing model
    and the simulated utilization of the first run.
    """
    p, device, img, state, model = _calibrated(cfg)
    expected = (lambda ch: vf.checksum_reference(img, ch)) if cfg.functional else None
    ver = V.Verifier(model, V.ChallengeSource(cfg.seed + 1, device.num_sms, p.iterations),
                     expected)
    ff = None if p.self_modifying else img.fast_forward()
    rows, accepted, util = [], 0, None
    for i in range(cfg.runs):
        ch = ver.challenge()
        m = V.measure(state, ch, functional=cfg.functional, fast_forward=ff,
                      jitter_seed=V.jitter_seed_for(cfg.seed + 1, i))
        v = ver.check(ch, m.checksum, m.cycles)
        accepted += v.accepted
        util = m.result.utilization if util is None else util
        rows.append({"run": i, "cycles": _time(m.cycles, cfg, device),
                     "checksum": "" if m.checksum is None else f"{m.checksum:#018x}",
                     "verdict": "accept" if v.accepted else "reject", "reason": v.reason.value})
    summary = {"run": "summary", "t_avg": _time(model.t_avg, cfg, device),
               "sigma": _time(model.sigma, cfg, device),
               "threshold": _time(model.threshold, cfg, device), "utilization": util}
    _write_csv(cfg.csv, rows + [summary])
    rate = accepted / cfg.runs
    return {"ok": rate >= min_accept, "accepted": accepted, "runs": cfg.runs,
            "acceptance_rate": rate, "min_accept": min_accept, "model": model.to_dict(),
            "utilization": util, "clock": cfg.clock}


def run_verify(cfg: ExperimentConfig, args) -> dict:
    return run_experiment(cfg, args.min_accept)


def run_attack(cfg: ExperimentConfig, args) -> dict:
    specs = [attack_spec(a) for a in cfg.attacks]
    if args.variant:
        entry = {"variant": args.variant}
        for k in ("count", "latency", "warps", "spin"):
            v = getattr(args, k)
            if v is not None:
                entry[k] = v
        if args.words:
            entry["words"] = tuple(int(w) for w in args.words.split(","))
        specs.append(attack_spec(entry))
    if not specs:
        raise ConfigError("no attack given: use --variant or the config's attacks list")
    p, device, img, state, model = _calibrated(cfg)
    expected = (lambda ch: vf.checksum_reference(img, ch)) if cfg.functional else None
    reports, rows = [], []
    for k, spec in enumerate(specs):
        setup = adversary.apply_attack(img, state, spec)
        ver = V.Verifier(model, V.ChallengeSource(cfg.seed + 2 + k, device.num_sms,
                                                  p.iterations), expected)
        detected = 0
        for i in range(cfg.runs):
            js = V.jitter_seed_for(cfg.seed + 2 + k, i)
            rep = adversary.evaluate(setup, ver, functional=cfg.functional, jitter_seed=js)
            detected += rep.detected
            if i == 0:
                reports.append(rep.to_dict())
            rows.append({"variant": spec.variant.value, "run": i, "detected": rep.detected,
                         "overhead_per_iteration": rep.overhead_per_iteration,
                         "reason": rep.verdict.reason.value})
        reports[-1]["detected_runs"] = detected
        reports[-1]["runs"] = cfg.runs
    _write_csv(cfg.csv, rows, ("variant", "run", "detected", "overhead_per_iteration", "reason"))
    ok = all(r["detected_runs"] == r["runs"] for r in reports)
    return {"ok": ok, "model": model.to_dict(), "attacks": reports}


def run_sake(cfg: ExperimentConfig, args) -> dict:
    group = sake.TEST_GROUP if args.group == "test" else sake.MODP_2048
    # seeded secrets only when the run must be reproducible
    rng = random.Random(cfg.seed) if cfg.deterministic else None
    checksum = int(args.checksum, 0)
    tamper = None
    if args.tamper is not None:
        idx, bit = (int(x) for x in args.tamper.split(":"))
        tamper = lambda i, m: m.flip(bit) if i == idx else m
    channel = sake.Channel(latency=args.latency, tamper=tamper)
    bound = args.time_bound
    ver, first = sake.verifier_start(group, rng, time_bound=bound,
                                     expected_c=lambda v2: checksum)
    dev = sake.DeviceEndpoint(lambda v2: (checksum, args.cycles), rng)
    result = {"group": args.group, "transcript": channel.transcript}
    try:
        sk_v, sk_d = sake.run_protocol(ver, dev, channel, first)
    except sake.SakeError as e:
        result.update(outcome="abort", error=type(e).__name__, message=str(e))
        result["ok"] = tamper is not None
        return result
    result.update(outcome="agreed" if sk_v == sk_d else "disagreed", key=hex(sk_v))
    result["ok"] = sk_v == sk_d and tamper is None
    return result


def run_trng(cfg: ExperimentConfig, args) -> dict:
    if cfg.deterministic:
        raise ConfigError("trng output is random by design and cannot run in deterministic mode")
    t = time.perf_counter()
    data = trng.harvest(args.workers, args.bytes)
    elapsed = time.perf_counter() - t
    sample = getattr(args, "out", None)
    if sample:
        Path(sample).write_bytes(data)
    rep = trng.entropy_report(data)
    return {"ok": rep.passes() and rep.bits_per_byte >= args.min_entropy,
            "report": rep.to_dict(), "workers": args.workers,
            "bytes_per_second": args.bytes / max(elapsed, 1e-9)}


def run_user_kernel_experiment(cfg: ExperimentConfig, sizes=(0, 320, 6400),
                               tolerance: float = 0.005) -> dict:
    p = cfg.params()
    rows = []
    for n in sizes:
        b = experiments.kernel_bench(n, params=p.with_(num_sms=cfg.num_sms or 1),
                                     seed=cfg.seed, fill_seed=cfg.fill_seed)
        rows.append(b.to_dict())
    _write_csv(cfg.csv, rows, ("size", "baseline_cycles", "protected_kernel_cycles",
                               "relative_difference", "vf_cycles", "combined_cycles",
                               "verification_cycles"))
    ok = all(r["relative_difference"] <= tolerance for r in rows)
    return {"ok": ok, "tolerance": tolerance, "kernels": rows}


def run_kernel_bench(cfg: ExperimentConfig, args) -> dict:
    sizes = tuple(int(s) for s in args.sizes.split(","))
    return run_user_kernel_experiment(cfg, sizes, args.tolerance)


# ---------------------------------------------------------------- parsing


def _common() -> argparse.ArgumentParser:
    # accepted before or after the subcommand
    c = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    c.add_argument("--config", help="JSON ExperimentConfig file")
    c.add_argument("--profile", help="built-in VF profile (exp1..exp4) or a device profile file")
    c.add_argument("--vf", help="VFParams JSON file")
    c.add_argument("--seed", type=int, help="master seed for challenges and noise")
    c.add_argument("--deterministic", action="store_true",
                   help="omit wall-clock fields so output depends only on config and seeds")
    c.add_argument("--out", help="write the JSON result here instead of stdout")
    c.add_argument("--csv", help="per-run CSV output")
    c.add_argument("--runs", type=int)
    c.add_argument("--num-sms", type=int)
    c.add_argument("--iterations", type=int)
    c.add_argument("--no-jitter", action="store_true")
    c.add_argument("--functional", action="store_true",
                   help="execute lane values and check checksums, not only timing")
    c.add_argument("--clock", choices=("cycles", "seconds"))
    return c


def _parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="attest", description=__doc__.splitlines()[0],
                                 parents=[common])
    sub = ap.add_subparsers(dest="command", required=True)

    def cmd(name, func, help):
        p = sub.add_parser(name, help=help, parents=[common])
        p.set_defaults(func=func)
        return p

    b = cmd("build", run_build, "generate a VF image")
    b.add_argument("--image", help="write the .vfbin here")
    b.add_argument("--dump-asm", help="write the assembly listing here")

    c = cmd("calibrate", run_calibrate, "time honest runs and fit the threshold")
    c.add_argument("--mode", choices=("normal", "quantile"), default="normal")

    v = cmd("verify", run_verify, "calibrate, then judge fresh honest sessions")
    v.add_argument("--min-accept", type=float, default=0.99)

    a = cmd("attack", run_attack, "run an attack and check that it is detected")
    a.add_argument("--variant", choices=[x.value for x in adversary.Variant] + ["nop"])
    a.add_argument("--count", type=int)
    a.add_argument("--words", help="comma-separated buffer word indices")
    a.add_argument("--latency", type=int)
    a.add_argument("--warps", type=int)
    a.add_argument("--spin", type=int)

    s = cmd("sake", run_sake, "run the key agreement over a simulated channel")
    s.add_argument("--group", choices=("test", "modp2048"), default="modp2048")
    s.add_argument("--checksum", default="0x1234")
    s.add_argument("--cycles", type=int, default=1000)
    s.add_argument("--latency", type=int, default=0)
    s.add_argument("--time-bound", type=float, default=None)
    s.add_argument("--tamper", help="MSG:BIT, flip one bit of message MSG (0-5)")

    t = cmd("trng", run_trng, "harvest race-condition randomness and test it")
    t.add_argument("--workers", type=int, default=4)
    t.add_argument("--bytes", type=int, default=65536)
    t.add_argument("--min-entropy", type=float, default=7.99)
    t.add_argument("--report", help="write the JSON report here; --out then names the sample file")

    k = cmd("kernel-bench", run_kernel_bench, "user kernel cost alone and after verification")
    k.add_argument("--sizes", default="0,320,6400")
    k.add_argument("--tolerance", type=float, default=0.005)
    return ap


def _profile_flags(value: str) -> dict:
    if value in vf.PROFILES:
        return {"profile": value}
    if Path(value).suffix in (".toml", ".json"):
        return {"device_profile": value}
    raise ConfigError(f"--profile {value!r} is neither a built-in profile nor a .toml/.json file")


def _config(args) -> ExperimentConfig:
    get = lambda name: getattr(args, name, None)
    base = ExperimentConfig.from_json(args.config).to_dict() if get("config") else {}
    flags = {"seed": get("seed"), "out": get("out"), "csv": get("csv"), "runs": get("runs"),
             "num_sms": get("num_sms"), "iterations": get("iterations"),
             "clock": get("clock"), "vf_params": get("vf")}
    base.update({k: v for k, v in flags.items() if v is not None})
    if get("profile"):
        base.update(_profile_flags(args.profile))
    if get("deterministic"):
        base["deterministic"] = True
    if get("no_jitter"):
        base["jitter"] = False
    if get("functional"):
        base["functional"] = True
    if args.command == "trng":
        # the sample goes to --out and the report to --report
        base["out"] = get("report")
    return ExperimentConfig.from_dict(base)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if getattr(args, "variant", None) == "nop":
        args.variant = "nop_inject"
    try:
        cfg = _config(args)
        result = args.func(cfg, args)
    except (ConfigError, adversary.Unsupported, V.CalibrationError,
            trng.SampleTooSmall, trng.InsufficientParallelism) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    if cfg.deterministic:
        result.pop("bytes_per_second", None)
    ok = bool(result.pop("ok"))
    _emit(_document(args.command, cfg, result, ok), cfg.out)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
