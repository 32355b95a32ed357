"""Stage orchestration: traces -> concepts -> distill -> compile -> shield
-> evaluate -> report.

Every stage reads its inputs from the run's output directory, writes
plain files, and stamps the manifest with the config hash, so a run is
reproducible to the byte from its config alone (no timestamps in any
JSON/JSONL artifact).
"""

from __future__ import annotations

import codecs
import hashlib
import json
import os
from dataclasses import replace

import numpy as np

from .conceptizer import (
    Conceptizer,
    ConceptSpec,
    ConceptTemplate,
    ConceptizerTraining,
    IgConfig,
    audit_support_mask,
    handover_default_template,
    ig_completeness_gap,
    slicing_default_template,
    train_conceptizer,
)
from .config import RunConfig
from .dsr import DsrConfig, distill_continuous, parse_expression, print_infix, print_prefix
from .env import DEFAULT_QOS_TARGETS, EnvConfig, RewardConfig, make_env
from .errors import ConfigError, MissingArtifactError
from .evaluation import (
    ExpressionPolicy,
    HeadPolicy,
    LatencyReport,
    NeuralPolicy,
    ScriptedPolicy,
    ShieldedPolicy,
    TablePolicy,
    compare_policies,
    expression_callable,
    fit_linear_head,
    fit_mlp_head,
    latency_bench,
    neural_callable,
    omega,
    run_episode,
)
from .kpm import TASK_HANDOVER, TASK_SLICING, flatten_state
from .logic import (
    DecisionTable,
    LogicTraining,
    RuleSet,
    build_rule_pool,
    build_vocabulary,
    compile_rules,
    distill_discrete,
)
from .shield import (
    RiskEstimator,
    SafeBank,
    Shield,
    admit_entries,
    calibrate_threshold,
    correction_rules_for,
    train_risk_estimator,
)
from .teacher import (
    NeuralTeacher,
    ScriptedTeacher,
    TraceBuffer,
    collect_traces,
    record_from_json,
    record_to_json,
    train_bc_teacher,
)

STAGES = ("traces", "conceptizer", "audit", "distill", "compile", "shield",
          "evaluate", "report")

ARTIFACTS = {
    "traces": "traces.jsonl",
    "scripted_traces": "scripted_traces.jsonl",
    "bc_teacher": "bc_teacher.json",
    "bc_report": "bc_report.json",
    "conceptizer": "conceptizer.json",
    "conceptizer_training": "conceptizer_training.json",
    "audit": "audit.json",
    "distill": "distill.json",
    "policy": "policy.json",
    "policy_text": "policy.txt",
    "shield": "shield.json",
    "bank": "bank.jsonl",
    "comparison": "comparison.json",
    "latency": "latency.json",
    "ablations": "ablations.json",
    "episodes_csv": "episodes.csv",
    "shield_log": "shield_log.jsonl",
    "report": "report.md",
    "manifest": "manifest.json",
}


def artifact_path(outdir: str, name: str) -> str:
    return os.path.join(outdir, ARTIFACTS[name])


def _require(outdir: str, name: str) -> str:
    path = artifact_path(outdir, name)
    if not os.path.exists(path):
        raise MissingArtifactError(
            f"stage requires missing artifact {ARTIFACTS[name]!r} "
            f"(expected at {path}); run the producing stage first"
        )
    return path


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _update_manifest(outdir: str, cfg: RunConfig, names: list[str]) -> None:
    path = artifact_path(outdir, "manifest")
    manifest = _read_json(path) if os.path.exists(path) else {}
    for name in names:
        apath = artifact_path(outdir, name)
        with open(apath, "rb") as fh:
            digest = hashlib.sha256(fh.read()).hexdigest()
        manifest[ARTIFACTS[name]] = {"sha256": digest, "config_hash": cfg.config_hash}
    _write_json(path, manifest)


# -- trace persistence -------------------------------------------------------


def write_traces(buffer: TraceBuffer, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in buffer:
            fh.write(record_to_json(rec) + "\n")


def trace_io(path: str, task: str, capacity: int = 1_000_000) -> TraceBuffer:
    """Parse a JSONL trace file; malformed lines are reported by number."""
    buffer = TraceBuffer(capacity)
    with codecs.open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                buffer.append(record_from_json(line, task))
            except (ValueError, KeyError) as e:
                raise ValueError(f"{path}:{lineno}: bad trace record: {e}") from e
    return buffer


# -- config unpacking --------------------------------------------------------


def env_config(cfg: RunConfig, seed_offset: int = 0,
               expose_override: bool | None = None) -> EnvConfig:
    env = cfg.section("env")
    reward_raw = env.get("reward", {})
    targets = dict(DEFAULT_QOS_TARGETS)
    for tag, pair in reward_raw.get("targets", {}).items():
        targets[tag] = (float(pair[0]), float(pair[1]))
    reward = RewardConfig(
        targets=targets,
        beta1=reward_raw.get("beta1", 1.0), beta2=reward_raw.get("beta2", 1.0),
        beta3=reward_raw.get("beta3", 1.0), beta4=reward_raw.get("beta4", 1.0),
        gamma=reward_raw.get("gamma", 0.99),
        horizon=reward_raw.get("horizon", 200),
    )
    expose = env.get("expose_true_concepts", True)
    if expose_override is not None:
        expose = expose_override
    return EnvConfig(
        seed=cfg.seed + seed_offset,
        task=cfg.task,
        ue_count_range=tuple(env.get("ue_count_range", (9, 14))),
        n_prb=env.get("n_prb", 50),
        reward=reward,
        expose_true_concepts=expose,
        kpm_noise_frac=env.get("kpm_noise_frac", 0.02),
        roster_change_prob=env.get("roster_change_prob", 0.06),
    )


def concept_template(cfg: RunConfig) -> ConceptTemplate:
    concepts = cfg.raw.get("concepts")
    if not concepts:
        return (slicing_default_template() if cfg.task == TASK_SLICING
                else handover_default_template())
    return ConceptTemplate(
        task=cfg.task,
        concepts=tuple(
            ConceptSpec(c["name"], c["entity_selector"], tuple(c["kpm_indices"]))
            for c in concepts
        ),
    )


# -- stages ------------------------------------------------------------------


def stage_traces(cfg: RunConfig, outdir: str) -> None:
    tcfg = cfg.section("teacher")
    kind = tcfg.get("kind", "neural")
    sigma_z = tcfg.get("sigma_z", 0.02)
    steps = tcfg.get("trace_steps", 20000)
    capacity = tcfg.get("buffer_capacity", 50000)

    scripted = ScriptedTeacher(cfg.task, sigma_z=sigma_z, noise_seed=cfg.seed)
    env = make_env(env_config(cfg, expose_override=True))
    scripted_buffer = TraceBuffer(capacity)
    collect_traces(env, scripted, steps, scripted_buffer)
    write_traces(scripted_buffer, artifact_path(outdir, "scripted_traces"))
    written = ["scripted_traces"]

    if kind == "neural":
        bc = tcfg.get("bc", {})
        teacher, report = train_bc_teacher(
            scripted_buffer,
            hidden=tuple(bc.get("hidden", (128, 128))),
            train_steps=bc.get("train_steps", 10000),
            batch=bc.get("batch", 256),
            lr=bc.get("lr", 1e-3),
            seed=cfg.seed,
            holdout_frac=bc.get("holdout_frac", 0.1),
        )
        _write_json(artifact_path(outdir, "bc_teacher"), teacher.to_dict())
        _write_json(artifact_path(outdir, "bc_report"), {
            "train_mse": report.train_mse, "holdout_mse": report.holdout_mse,
            "train_mean_abs": report.train_mean_abs,
            "holdout_mean_abs": report.holdout_mean_abs,
        })
        env2 = make_env(env_config(cfg, seed_offset=1, expose_override=False))
        buffer = TraceBuffer(capacity)
        collect_traces(env2, teacher, steps, buffer)
        written += ["bc_teacher", "bc_report"]
    else:
        buffer = scripted_buffer
    write_traces(buffer, artifact_path(outdir, "traces"))
    written.append("traces")
    _update_manifest(outdir, cfg, written)


def load_buffer(cfg: RunConfig, outdir: str) -> TraceBuffer:
    path = _require(outdir, "traces")
    return trace_io(path, cfg.task,
                    cfg.section("teacher").get("buffer_capacity", 50000))


def stage_conceptizer(cfg: RunConfig, outdir: str) -> None:
    buffer = load_buffer(cfg, outdir)
    template = concept_template(cfg)
    ccfg = cfg.section("conceptizer")
    params = ConceptizerTraining(
        d_h=ccfg.get("d_h", 8), hidden=ccfg.get("hidden", 16),
        batch=ccfg.get("batch", 256), max_epochs=ccfg.get("max_epochs", 60),
        patience=ccfg.get("patience", 20), lr=ccfg.get("lr", 3e-3),
        seed=cfg.seed,
    )
    model, aux, history = train_conceptizer(template, buffer, params)
    _write_json(artifact_path(outdir, "conceptizer"), model.to_dict())
    _write_json(artifact_path(outdir, "conceptizer_training"), {
        "loss_history": history,
        "final_loss": history[-1],
        "aux_head": {"a": aux.a.tolist(), "b": aux.b.tolist()},
    })
    _update_manifest(outdir, cfg, ["conceptizer", "conceptizer_training"])


def load_conceptizer(outdir: str) -> Conceptizer:
    return Conceptizer.from_dict(_read_json(_require(outdir, "conceptizer")))


def stage_audit(cfg: RunConfig, outdir: str) -> None:
    model = load_conceptizer(outdir)
    acfg = cfg.section("audit")
    n_probes = acfg.get("probes", 50)
    n_ig = acfg.get("n_ig", 256)
    env = make_env(env_config(cfg, seed_offset=7))
    env.reset()
    rng = np.random.default_rng(cfg.seed + 7)
    probes = []
    for _ in range(n_probes):
        action = (rng.dirichlet(np.ones(3)) if cfg.task == TASK_SLICING
                  else int(rng.integers(0, 2)))
        probes.append(env.step(action).state)
    report = audit_support_mask(model, probes, IgConfig(steps=64))
    gaps = []
    for i in range(min(20, len(probes))):
        k = i % model.template.k
        gap, delta = ig_completeness_gap(model, k, probes[i], IgConfig(steps=n_ig))
        gaps.append({"concept": model.template.concepts[k].name,
                     "gap": gap, "delta": delta,
                     "within_tol": gap <= 1e-3 * max(1.0, delta)})
    _write_json(artifact_path(outdir, "audit"), {
        "support": report.to_dict(),
        "completeness": gaps,
        "n_ig": n_ig,
        "probes": n_probes,
    })
    _update_manifest(outdir, cfg, ["audit"])


def buffer_concepts_and_logits(buffer: TraceBuffer, model: Conceptizer
                               ) -> tuple[np.ndarray, np.ndarray]:
    c = np.stack([model.conceptize(r.state) for r in buffer])
    z = np.stack([np.asarray(r.z, dtype=np.float64) for r in buffer])
    return c, z


def stage_distill(cfg: RunConfig, outdir: str) -> None:
    buffer = load_buffer(cfg, outdir)
    model = load_conceptizer(outdir)
    concepts, z = buffer_concepts_and_logits(buffer, model)
    if cfg.task == TASK_SLICING:
        dcfg = cfg.section("dsr")
        trees, histories, js = [], [], []
        for dim in range(z.shape[1]):
            res = distill_continuous(concepts, z[:, dim], DsrConfig(
                d_max=dcfg.get("d_max", 6), batch=dcfg.get("batch", 500),
                iterations=dcfg.get("iterations", 400),
                risk_quantile=dcfg.get("risk_quantile", 0.05),
                const_fit_steps=dcfg.get("const_fit_steps", 20),
                fit_subsample=dcfg.get("fit_subsample", 256),
                entropy_weight=dcfg.get("entropy_weight", 0.01),
                hidden=dcfg.get("hidden", 32), lr=dcfg.get("lr", 0.005),
                seed=cfg.seed + dim,
                max_evaluations=dcfg.get("max_evaluations", 200000),
                target_j=dcfg.get("target_j", 0.999),
            ))
            trees.append(res.tree)
            histories.append(res.j_history)
            js.append(res.best_j)
        _write_json(artifact_path(outdir, "distill"), {
            "kind": "expressions",
            "expressions": [print_prefix(t) for t in trees],
            "best_j": js,
            "j_history": histories,
            "n_vars": model.template.k,
        })
    else:
        lcfg = cfg.section("logic")
        quantiles = np.stack([
            np.quantile(concepts, 0.4, axis=0),
            np.quantile(concepts, 0.6, axis=0),
        ])
        vocab = build_vocabulary(
            model.template.k, quantiles,
            tuple(tuple(p) for p in lcfg.get("comparison_pairs", [[1, 0]])),
        )
        ruleset = build_rule_pool(
            vocab, concepts, np.argmax(z, axis=1), model.template.k,
            n_actions=z.shape[1],
            top_triples_per_head=lcfg.get("top_triples_per_head", 50),
            kappa=lcfg.get("kappa", 2.0),
            prune_threshold=lcfg.get("prune_threshold", 0.1),
        )
        history = distill_discrete(concepts, z, ruleset, LogicTraining(
            steps=lcfg.get("steps", 1500), lr=lcfg.get("lr", 0.05), seed=cfg.seed,
        ))
        payload = ruleset.to_dict()
        payload["kl_history"] = history
        _write_json(artifact_path(outdir, "distill"), payload)
    _update_manifest(outdir, cfg, ["distill"])


def stage_compile(cfg: RunConfig, outdir: str) -> None:
    raw = _read_json(_require(outdir, "distill"))
    if cfg.task == TASK_SLICING:
        n_vars = raw["n_vars"]
        trees = [parse_expression(t, n_vars) for t in raw["expressions"]]
        text = "\n".join(
            f"z_{name} = {print_infix(t)}"
            for name, t in zip(("eMBB", "URLLC", "mMTC"), trees)
        )
        payload = {
            "kind": "expressions",
            "expressions": raw["expressions"],
            "n_vars": n_vars,
            "omega": omega(trees).to_dict(),
        }
    else:
        ruleset = RuleSet.from_dict(raw)
        table = compile_rules(ruleset, action_names=("stay", "switch"))
        text = table.describe()
        payload = table.to_dict()
        payload["omega"] = omega(table).to_dict()
    _write_json(artifact_path(outdir, "policy"), payload)
    with open(artifact_path(outdir, "policy_text"), "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    _update_manifest(outdir, cfg, ["policy", "policy_text"])


def load_policy(cfg: RunConfig, outdir: str):
    raw = _read_json(_require(outdir, "policy"))
    model = load_conceptizer(outdir)
    if raw.get("kind") == "expressions":
        trees = [parse_expression(t, raw["n_vars"]) for t in raw["expressions"]]
        return ExpressionPolicy(model, trees), trees
    table = DecisionTable.from_dict(raw)
    return TablePolicy(model, table), table


def risk_training_data(buffer: TraceBuffer, model: Conceptizer, t_prime: int):
    """Label each step by whether any violation occurs in its t_prime-step
    lookahead window."""
    records = buffer.snapshot()
    concepts, actions, labels = [], [], []
    for i in range(len(records) - t_prime):
        window = records[i + 1 : i + 1 + t_prime]
        broke = any(r.v_thp > 0.0 or r.v_dly > 0.0 for r in window)
        concepts.append(model.conceptize(records[i].state))
        actions.append(records[i].a)
        labels.append(1.0 if broke else 0.0)
    return np.stack(concepts), actions, np.array(labels)


def build_shield(cfg: RunConfig, outdir: str) -> Shield:
    scfg = cfg.section("shield")
    payload = _read_json(_require(outdir, "shield"))
    estimator = RiskEstimator.from_dict(payload["risk"])
    with open(_require(outdir, "bank"), "r", encoding="utf-8") as fh:
        bank = SafeBank.from_jsonl(fh.read(), scfg.get("bank_capacity", 5000))
    rules = correction_rules_for(
        cfg.task, a_min=scfg.get("a_min", 0.05), a_max=scfg.get("a_max", 0.8),
        min_dwell=scfg.get("min_dwell", 2),
    )
    return Shield(rules, estimator, bank)


def stage_shield(cfg: RunConfig, outdir: str) -> None:
    buffer = load_buffer(cfg, outdir)
    model = load_conceptizer(outdir)
    scfg = cfg.section("shield")
    t_prime = scfg.get("t_prime", 10)
    risk_cfg = scfg.get("risk", {})
    concepts, actions, labels = risk_training_data(buffer, model, t_prime)
    estimator = train_risk_estimator(
        cfg.task, concepts, actions, labels, t_prime=t_prime,
        hidden=tuple(risk_cfg.get("hidden", (16, 16))),
        steps=risk_cfg.get("steps", 2000), lr=risk_cfg.get("lr", 3e-3),
        seed=cfg.seed,
    )
    bank = admit_entries(buffer, model.conceptize, t_prime=t_prime,
                         capacity=scfg.get("bank_capacity", 5000))
    if len(bank) == 0:
        raise ConfigError(
            "no trace window passed the safe-bank admission check; "
            "loosen QoS targets or extend tracing"
        )
    delta = calibrate_threshold(estimator, bank, scfg.get("percentile", 95.0))
    _write_json(artifact_path(outdir, "shield"), {
        "risk": estimator.to_dict(),
        "delta": delta,
        "t_prime": t_prime,
        "a_min": scfg.get("a_min", 0.05),
        "a_max": scfg.get("a_max", 0.8),
        "min_dwell": scfg.get("min_dwell", 2),
        "percentile": scfg.get("percentile", 95.0),
        "bank_size": len(bank),
    })
    with open(artifact_path(outdir, "bank"), "w", encoding="utf-8") as fh:
        fh.write(bank.to_jsonl())
    _update_manifest(outdir, cfg, ["shield", "bank"])


def teacher_policy(cfg: RunConfig, outdir: str):
    tcfg = cfg.section("teacher")
    if tcfg.get("kind", "neural") == "neural":
        teacher = NeuralTeacher.from_dict(_read_json(_require(outdir, "bc_teacher")))
        return NeuralPolicy(teacher)
    return ScriptedPolicy(
        ScriptedTeacher(cfg.task, sigma_z=tcfg.get("sigma_z", 0.02),
                        noise_seed=cfg.seed)
    )


def action_agreement(env_cfg: EnvConfig, reference, candidate, seeds: list[int],
                     steps: int) -> float:
    """Fraction of the reference policy's on-trajectory decisions that the
    candidate reproduces (discrete tasks)."""
    agree = 0
    total = 0
    for seed in sorted(seeds):
        cfg = replace(env_cfg, seed=seed)
        env = make_env(cfg)
        env.reset()
        reference.reset()
        candidate.reset()
        for _ in range(steps):
            tc = env.true_concepts if cfg.expose_true_concepts else None
            a_ref = reference.act(env.state, tc)
            a_cand = candidate.act(env.state, tc)
            agree += int(a_ref == a_cand)
            total += 1
            env.step(a_ref)
    return agree / total


def stage_evaluate(cfg: RunConfig, outdir: str) -> None:
    ecfg = cfg.section("eval")
    seeds = list(ecfg.get("seeds", [11, 12, 13, 14, 15]))
    steps = ecfg.get("steps", 2000)
    teacher = teacher_policy(cfg, outdir)
    expose = isinstance(teacher, ScriptedPolicy)
    ecfg_env = env_config(cfg, expose_override=True if expose else None)

    student, policy_obj = load_policy(cfg, outdir)
    shield = build_shield(cfg, outdir)
    report = compare_policies(ecfg_env, teacher, student, seeds, steps,
                              student_shield=shield)
    report.omega_student = omega(policy_obj).to_dict()
    if cfg.task == TASK_HANDOVER:
        report.action_agreement = action_agreement(
            ecfg_env, teacher, student, seeds, steps
        )

    latency = _latency_stage(cfg, outdir, student, policy_obj)
    if latency is not None:
        report.latency_ratio = latency.ratios_vs.get("student")
        _write_json(artifact_path(outdir, "latency"), latency.to_dict())

    _write_json(artifact_path(outdir, "comparison"), report.to_dict())
    _write_csv_series(cfg, outdir, ecfg_env, teacher, student, shield, seeds,
                      min(steps, 500))
    with open(artifact_path(outdir, "shield_log"), "w", encoding="utf-8") as fh:
        for decision in shield.log:
            fh.write(decision.to_json() + "\n")

    cells = ecfg.get("ablations", [])
    if cells:
        ablations = run_ablations(cfg, outdir, cells, seeds, steps)
        _write_json(artifact_path(outdir, "ablations"), ablations)
        _update_manifest(outdir, cfg, ["ablations"])
    written = ["comparison", "episodes_csv", "shield_log"]
    if latency is not None:
        written.append("latency")
    _update_manifest(outdir, cfg, written)


def _latency_stage(cfg: RunConfig, outdir: str, student, policy_obj
                   ) -> LatencyReport | None:
    tcfg = cfg.section("teacher")
    if tcfg.get("kind", "neural") != "neural":
        return None
    ecfg = cfg.section("eval")
    n_inputs = ecfg.get("latency_inputs", 100000)
    reps = ecfg.get("latency_reps", 5)
    teacher = NeuralTeacher.from_dict(_read_json(_require(outdir, "bc_teacher")))
    rng = np.random.default_rng(cfg.seed + 99)
    k = student.conceptizer.template.k
    concept_corpus = [rng.uniform(0.0, 1.0, size=k) for _ in range(n_inputs)]
    flat_corpus = [rng.normal(size=teacher.net.input_dim) for _ in range(n_inputs)]
    if cfg.task == TASK_SLICING:
        student_fn = expression_callable(policy_obj)
    else:
        student_fn = policy_obj.compile()
    return latency_bench(
        {"teacher": neural_callable(teacher), "student": student_fn},
        {"teacher": flat_corpus, "student": concept_corpus},
        repetitions=reps,
    )


def _write_csv_series(cfg: RunConfig, outdir: str, env_cfg, teacher, student,
                      shield, seeds: list[int], steps: int) -> None:
    rows = ["seed,step,teacher_reward,student_reward,teacher_v_thp,"
            "student_v_thp,teacher_v_dly,student_v_dly"]
    for seed in sorted(seeds):
        te = run_episode(env_cfg, teacher, steps, seed=seed)
        st = run_episode(env_cfg, student, steps, seed=seed, shield=shield)
        for i in range(steps):
            rows.append(
                f"{seed},{i},{te.rewards[i]:.10g},{st.rewards[i]:.10g},"
                f"{te.v_thp[i]:.10g},{st.v_thp[i]:.10g},"
                f"{te.v_dly[i]:.10g},{st.v_dly[i]:.10g}"
            )
    with open(artifact_path(outdir, "episodes_csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")


def run_ablations(cfg: RunConfig, outdir: str, cells: list[str],
                  seeds: list[int], steps: int) -> dict:
    """One ComparisonReport per requested ablation cell."""
    buffer = load_buffer(cfg, outdir)
    model = load_conceptizer(outdir)
    teacher = teacher_policy(cfg, outdir)
    expose = isinstance(teacher, ScriptedPolicy)
    ecfg_env = env_config(cfg, expose_override=True if expose else None)
    student, _ = load_policy(cfg, outdir)
    shield = build_shield(cfg, outdir)
    concepts, z = buffer_concepts_and_logits(buffer, model)

    out: dict = {}
    for cell in cells:
        if cell == "no_shield":
            rep = compare_policies(ecfg_env, teacher, student, seeds, steps)
        elif cell == "no_correction":
            partial = Shield([], shield.estimator, shield.bank)
            rep = compare_policies(ecfg_env, teacher, student, seeds, steps,
                                   student_shield=partial)
        elif cell == "no_retrieval":
            partial = Shield(shield.rules, shield.estimator, SafeBank(1))
            # an empty bank disables retrieval; silence the fallback warning
            import warnings as _w
            with _w.catch_warnings():
                _w.simplefilter("ignore")
                rep = compare_policies(ecfg_env, teacher, student, seeds, steps,
                                       student_shield=partial)
        elif cell == "linear_head":
            net = fit_linear_head(concepts, z)
            rep = compare_policies(ecfg_env, teacher,
                                   HeadPolicy(model, net, cfg.task), seeds, steps,
                                   student_shield=build_shield(cfg, outdir))
        elif cell == "mlp_head":
            net = fit_mlp_head(concepts, z, seed=cfg.seed)
            rep = compare_policies(ecfg_env, teacher,
                                   HeadPolicy(model, net, cfg.task), seeds, steps,
                                   student_shield=build_shield(cfg, outdir))
        else:
            raise ConfigError(f"unknown ablation cell: {cell!r}")
        out[cell] = rep.to_dict()
    return out


def stage_report(cfg: RunConfig, outdir: str) -> None:
    comparison = _read_json(_require(outdir, "comparison"))
    lines = ["# Run report", ""]
    lines += [f"- task: `{cfg.task}`", f"- config hash: `{cfg.config_hash}`",
              f"- seed: {cfg.seed}", ""]

    audit_path = artifact_path(outdir, "audit")
    lines.append("## Concept audit")
    if os.path.exists(audit_path):
        audit = _read_json(audit_path)
        lines.append(
            f"- off-support attribution max: {audit['support']['off_support_max']}"
        )
        ok = sum(1 for g in audit["completeness"] if g["within_tol"])
        lines.append(f"- completeness within tolerance: {ok}/{len(audit['completeness'])}")
        lines.append("")
        lines.append("| concept | metric id | max abs attribution |")
        lines.append("|---|---|---|")
        for row in audit["support"]["rows"]:
            lines.append(f"| {row['concept']} | {row['metric_id']} | "
                         f"{row['max_abs_attribution']:.4g} |")
    else:
        lines.append("- not run")
    lines.append("")

    lines.append("## Distilled policy")
    text_path = artifact_path(outdir, "policy_text")
    if os.path.exists(text_path):
        with open(text_path, "r", encoding="utf-8") as fh:
            lines += ["```", fh.read().rstrip(), "```"]
    else:
        lines.append("- not run")
    lines.append("")

    lines.append("## Symbolic complexity")
    om = comparison.get("omega_student")
    if om:
        lines.append(f"- atoms: {om['total']} (variables {om['variables']}, "
                     f"constants {om['constants']}, operators {om['operators']}, "
                     f"comparators {om['comparators']}, connectives "
                     f"{om['connectives']}, actions {om['action_labels']}; "
                     f"convention {om['convention']})")
    lines.append("")

    lines.append("## Reward and violations")
    lines.append("| metric | teacher | student |")
    lines.append("|---|---|---|")
    lines.append(f"| mean reward | {comparison['teacher_mean_reward']:.4f} "
                 f"| {comparison['student_mean_reward']:.4f} |")
    lines.append(f"| V_thp | {comparison['teacher_v_thp']:.4f} "
                 f"| {comparison['student_v_thp']:.4f} |")
    lines.append(f"| V_dly | {comparison['teacher_v_dly']:.4f} "
                 f"| {comparison['student_v_dly']:.4f} |")
    lines.append(f"- recovery ratio: {comparison['recovery_ratio']:.4f}")
    if comparison.get("action_agreement") is not None:
        lines.append(f"- action agreement: {comparison['action_agreement']:.4f}")
    lines.append("")

    lines.append("## Latency")
    lat_path = artifact_path(outdir, "latency")
    if os.path.exists(lat_path):
        lat = _read_json(lat_path)
        for name, us in lat["per_decision_us"].items():
            lines.append(f"- {name}: {us:.2f} us/decision")
        for name, ratio in lat["ratios_vs"].items():
            lines.append(f"- speedup vs teacher ({name}): {ratio:.1f}x")
    else:
        lines.append("- not run")
    lines.append("")

    lines.append("## Shield")
    log_path = artifact_path(outdir, "shield_log")
    if os.path.exists(log_path):
        with open(log_path, "r", encoding="utf-8") as fh:
            decisions = [json.loads(l) for l in fh if l.strip()]
        triggers = sum(1 for d in decisions if d["triggered"])
        lines.append(f"- decisions: {len(decisions)}, retrievals: {triggers}")
    else:
        lines.append("- not run")
    lines.append("")

    abl_path = artifact_path(outdir, "ablations")
    if os.path.exists(abl_path):
        lines.append("## Ablations")
        lines.append("| cell | reward ratio | V_thp | V_dly |")
        lines.append("|---|---|---|---|")
        for cell, rep in _read_json(abl_path).items():
            lines.append(f"| {cell} | {rep['recovery_ratio']:.4f} "
                         f"| {rep['student_v_thp']:.4f} "
                         f"| {rep['student_v_dly']:.4f} |")
        lines.append("")

    with open(artifact_path(outdir, "report"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    _update_manifest(outdir, cfg, ["report"])


_STAGE_FN = {
    "traces": stage_traces,
    "conceptizer": stage_conceptizer,
    "audit": stage_audit,
    "distill": stage_distill,
    "compile": stage_compile,
    "shield": stage_shield,
    "evaluate": stage_evaluate,
    "report": stage_report,
}


def run_config(cfg: RunConfig, stages: list[str] | None = None) -> str:
    """Execute the requested stages in canonical order; returns the output
    directory."""
    wanted = list(STAGES) if stages is None else list(stages)
    for stage in wanted:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage: {stage!r}")
    outdir = cfg.output_dir
    os.makedirs(outdir, exist_ok=True)
    for stage in STAGES:
        if stage in wanted:
            _STAGE_FN[stage](cfg, outdir)
    return outdir
