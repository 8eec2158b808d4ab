"""canonet command line.

Subcommands: gen, embed, attack, recover, verify, pipeline, fp-eval, bench.
Models, keys and reports are JSON files.  ``CANONET_SEED`` overrides the
seeds of gen, attack and pipeline.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import graph as G
from . import motifs
from .attack import CAMOUFLAGE, VARIANTS, AttackConfig, attack
from .harness import PipelineSpec, bench, env_seed, fp_eval, run_pipeline
from .probes import DEFAULT_PROBE_SEED, ProbeConfig
from .recovery import RecoveryConfig, SanityCheckError, recover
from .verifier import CertificateConfig, Tier2Config, verify
from .watermark import WatermarkKey, embed, keygen


def _write(path, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _add_attack_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ratio", type=float, default=0.2)
    p.add_argument("--variant", choices=VARIANTS, default="zero")
    p.add_argument("--opseq-len", type=int, default=3)
    p.add_argument("--split-p", type=float, default=1.0)
    p.add_argument("--camouflage", choices=CAMOUFLAGE, default="none")
    p.add_argument("--scale-lo", type=float, default=0.6)
    p.add_argument("--scale-hi", type=float, default=1.4)
    p.add_argument("--seed", type=lambda s: int(s, 0), default=0)
    p.add_argument("--tail-placement", action="store_true",
                   help="append injected channels instead of interleaving them")


def _add_recovery_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--probes", type=int, default=32)
    p.add_argument("--probe-seed", type=lambda s: int(s, 0), default=DEFAULT_PROBE_SEED)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--tau", type=float, default=1e-3)
    p.add_argument("--tmin", type=int, default=3)
    p.add_argument("--gamma-drop", type=float, default=1e-6)
    p.add_argument("--gamma-keep", type=float, default=1e-3)
    p.add_argument("--sanity", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--sanity-tol", type=float, default=1e-7)


def _add_verify_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--perm-tol", type=float, default=1e-3)
    p.add_argument("--allow-scaling", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--include-bias", action="store_true")
    p.add_argument("--lambda", dest="lam", type=float, default=0.9)
    p.add_argument("--delta", type=float, default=0.02)


def _attack_cfg(a) -> AttackConfig:
    return AttackConfig(ratio=a.ratio, variant=a.variant, opseq_len=a.opseq_len,
                        split_p=a.split_p, camouflage=a.camouflage,
                        scale_range=(a.scale_lo, a.scale_hi), seed=env_seed(a.seed),
                        interior_placement=not a.tail_placement)


def _recovery_cfgs(a) -> tuple[RecoveryConfig, ProbeConfig]:
    return (RecoveryConfig(eps=a.eps, tau=a.tau, t_min=a.tmin, gamma_drop=a.gamma_drop,
                           gamma_keep=a.gamma_keep, sanity_check=a.sanity,
                           sanity_tol=a.sanity_tol),
            ProbeConfig(T=a.probes, seed=a.probe_seed))


def _verify_cfgs(a) -> tuple[CertificateConfig, Tier2Config]:
    return (CertificateConfig(perm_tol=a.perm_tol, allow_scaling=a.allow_scaling,
                              include_bias=a.include_bias),
            Tier2Config(lam=a.lam, delta=a.delta))


def cmd_gen(a) -> int:
    G.save(motifs.build(a.motif, env_seed(a.seed)), a.out)
    return 0


def cmd_embed(a) -> int:
    g = G.load(a.model)
    layer = a.layer or motifs.default_target(g.meta.get("motif", ""))
    key = keygen(g, layer, a.bits, a.key_seed)
    out, iters = embed(g, key, max_iters=a.max_iters)
    G.save(out, a.out)
    _write(a.key_out, key.to_json())
    print(f"embedded {key.n} bits into {layer} in {iters} iterations", file=sys.stderr)
    return 0


def cmd_attack(a) -> int:
    g, rep = attack(G.load(a.model), _attack_cfg(a))
    G.save(g, a.out)
    _write(a.report, rep.to_json(not a.no_timings))
    return 0


def cmd_recover(a) -> int:
    rcfg, pcfg = _recovery_cfgs(a)
    try:
        g, rep = recover(G.load(a.model), rcfg, pcfg)
    except SanityCheckError as exc:
        _write(a.report, {"error": "sanity_check", "message": str(exc), "delta": exc.delta})
        return 1
    G.save(g, a.out)
    _write(a.report, rep.to_json(not a.no_timings))
    return 0


def cmd_verify(a) -> int:
    ccfg, t2 = _verify_cfgs(a)
    key = WatermarkKey.from_json(json.loads(Path(a.key).read_text()))
    rep = verify(G.load(a.clean), G.load(a.attacked), G.load(a.recovered), key, ccfg, t2)
    _write(a.report, rep.to_json())
    return 0 if rep.passed else 1


def cmd_pipeline(a) -> int:
    rcfg, pcfg = _recovery_cfgs(a)
    ccfg, t2 = _verify_cfgs(a)
    acfg = _attack_cfg(a)
    spec = PipelineSpec(motif=a.motif, seed=a.motif_seed, target=a.target, wm_bits=a.bits,
                        wm_seed=a.key_seed, attack=acfg, recovery=rcfg, probes=pcfg, cert=ccfg,
                        tier2=t2, out_dir=a.out_dir, skip_recovery=a.skip_recovery,
                        timings=not a.no_timings).with_env_seed()
    result = run_pipeline(spec)
    _write(None, result.summary)
    return result.exit_code


def cmd_fp_eval(a) -> int:
    rcfg, pcfg = _recovery_cfgs(a)
    names = a.motif or list(motifs.NAMES)
    rows = []
    for name in names:
        for target in motifs.watermark_targets(name):
            r = fp_eval(name, target, rcfg=rcfg, pcfg=pcfg)
            rows.append({"motif": r.motif, "target": r.target, "P_FPR": r.p_fpr, "L_FP": r.l_fp,
                         "delta_sim": r.delta_sim, "delta_out_proxy": r.delta_out,
                         "tier1_pass": r.tier1_pass, "ambiguous": r.ambiguous_clusters})
    summary = {"rows": rows,
               "tier1_pass_rate": sum(r["tier1_pass"] for r in rows) / len(rows),
               "max_P_FPR": max(r["P_FPR"] for r in rows)}
    _write(a.out, summary)
    clean = summary["max_P_FPR"] == 0 and summary["tier1_pass_rate"] == 1.0
    return 0 if clean else 1


def cmd_bench(a) -> int:
    rep = bench(motif_names=a.motif or ["mlp"], ratios=a.ratios, variants=a.variants,
                probe_counts=a.probe_counts, opseq_len=a.opseq_len)
    out = rep.to_json()
    if a.no_timings:
        for row in out["rows"]:
            for k in [k for k in row if k.endswith("_ns")]:
                row.pop(k)
    _write(a.out, out)
    if a.csv:
        Path(a.csv).write_text(rep.csv())
    for note in rep.notes:
        print(f"note: {note}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="canonet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a built-in motif as a JSON model")
    p.add_argument("--motif", choices=motifs.NAMES, required=True)
    p.add_argument("--seed", type=lambda s: int(s, 0), default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("embed", help="embed a projection watermark")
    p.add_argument("--model", required=True)
    p.add_argument("--layer")
    p.add_argument("--bits", type=int, default=128)
    p.add_argument("--key-seed", type=lambda s: int(s, 0), default=1)
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--out", required=True)
    p.add_argument("--key-out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("attack", help="apply a structural obfuscation attack")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--no-timings", action="store_true")
    _add_attack_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("recover", help="recover a compact canonical layout")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--no-timings", action="store_true")
    _add_recovery_flags(p)
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("verify", help="two-tier ownership verification")
    for name in ("clean", "attacked", "recovered", "key"):
        p.add_argument(f"--{name}", required=True)
    p.add_argument("--report")
    _add_verify_flags(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("pipeline", help="gen, embed, attack, recover and verify")
    p.add_argument("--motif", choices=motifs.NAMES, default="residual")
    p.add_argument("--motif-seed", type=lambda s: int(s, 0), default=0)
    p.add_argument("--target")
    p.add_argument("--bits", type=int, default=128)
    p.add_argument("--key-seed", type=lambda s: int(s, 0), default=1)
    p.add_argument("--out-dir")
    p.add_argument("--skip-recovery", action="store_true")
    p.add_argument("--no-timings", action="store_true")
    _add_attack_flags(p)
    _add_recovery_flags(p)
    _add_verify_flags(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("fp-eval", help="run recovery on clean models")
    p.add_argument("--motif", action="append", choices=motifs.NAMES)
    p.add_argument("--out")
    _add_recovery_flags(p)
    p.set_defaults(func=cmd_fp_eval)

    p = sub.add_parser("bench", help="attack/recover timing sweep")
    p.add_argument("--motif", action="append", choices=motifs.NAMES)
    p.add_argument("--ratios", type=float, nargs="+", default=[0.2, 0.5])
    p.add_argument("--variants", nargs="+", choices=VARIANTS,
                   default=["zero", "clique", "split", "mix_opseq"])
    p.add_argument("--probe-counts", type=int, nargs="+", default=[8, 16, 32, 64])
    p.add_argument("--opseq-len", type=int, default=3)
    p.add_argument("--out")
    p.add_argument("--csv")
    p.add_argument("--no-timings", action="store_true")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stdout)
        return 2


if __name__ == "__main__":
    sys.exit(main())
