"""Subcommand implementations behind the CLI.

Corpus collection, prior and reward-model training, interactive
finetuning, one-shot planning, the adaptation evaluation grid, the
deployment ablation, and CSV plotting.  Every command is deterministic
given (config, seed): outputs are written with exact float reprs, CSVs
carry provenance comment lines (config hash, checkpoint hashes), and a
resolved-config sidecar lands next to each primary output.
"""

from __future__ import annotations

import hashlib
import math
import os

import numpy as np

from . import simrobot as sim
from . import tasks as tasklib
from .config import RunConfig, config_hash, write_resolved
from .constraints import ConstraintSet
from .diffusion import (fit_denoiser, load_denoiser, respace, save_denoiser,
                        make_schedule)
from .executor import ExecutorConfig, deploy, measure, warm_start
from .finetune import InteractiveConfig, train_interactive
from .planner import PlannerConfig, guided_sample
from .rewards import load_reward_model, save_reward_model, train_reward_model
from .simrobot import Demonstrator, EnvParams
from .trajectory import (DatasetMeta, Trajectory, TrajectoryDataset,
                         TrajectoryLayout, load_dataset, save_dataset,
                         window_rollout)

EVAL_CELLS = (
    ("C1_Roff_Coff", 1, False, False),
    ("C10_Roff_Coff", 10, False, False),
    ("C100_Roff_Coff", 100, False, False),
    ("C1_Ron_Coff", 1, True, False),
    ("C10_Ron_Coff", 10, True, False),
    ("C100_Ron_Coff", 100, True, False),
    ("C1_Roff_Con", 1, False, True),
)

# seed stream separators; arbitrary primes keep the streams disjoint
_SEED_TASK = 10007
_SEED_BASELINE = 611953
_SEED_CELL_EP = 1000003


def file_hash(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()[:16]


def _cell(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, comments, columns, rows) -> None:
    lines = [f"# {c}" for c in comments]
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(_cell(v) for v in row))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def _layout_for(denoiser) -> TrajectoryLayout:
    # rows = n_state + n_action = (3J + 7) + J
    j = (denoiser.rows - 7) // 4
    layout = TrajectoryLayout(j)
    if layout.rows != denoiser.rows:
        raise ValueError(f"checkpoint rows {denoiser.rows} do not match an "
                         f"articulated-robot layout")
    return layout


# ---------------------------------------------------------------- collect

# extra stride-1 windows cover this many ticks after a command change
_DENSE_SPAN = 24
_SWITCH_LO, _SWITCH_HI = 100, 400


def _windows_at(pairs, horizon: int, starts) -> list:
    """Windows at explicit start indices (same layout as window_rollout)."""
    if not pairs or not starts:
        return []
    cols = [np.concatenate([np.asarray(s, dtype=np.float64).ravel(),
                            np.asarray(a, dtype=np.float64).ravel()])
            for s, a in pairs]
    n_state = np.asarray(pairs[0][0]).size
    n_action = np.asarray(pairs[0][1]).size
    mat = np.stack(cols, axis=1)
    return [Trajectory(mat[:, s:s + horizon].copy(), n_state, n_action)
            for s in starts if s + horizon <= mat.shape[1]]


def _dense_starts(n_pairs: int, horizon: int, stride: int,
                  centers) -> list[int]:
    """Stride-1 start indices after each command-change tick, skipping the
    ones the plain strided pass already produced."""
    out = []
    for c in centers:
        for s in range(c, c + _DENSE_SPAN + 1):
            if s % stride and s + horizon <= n_pairs:
                out.append(s)
    return sorted(set(out))


def _draw_command(master, cfg) -> tuple:
    vx = float(master.uniform(-cfg.dataset_speed_max, cfg.dataset_speed_max))
    vyaw = float(master.uniform(-cfg.dataset_yaw_max, cfg.dataset_yaw_max)) \
        if master.random() < 0.5 else 0.0
    return (vx, 0.0, vyaw)


def cmd_collect(cfg: RunConfig) -> dict:
    """Demonstrator rollouts, windowed into the training corpus.

    Most episodes hold one command throughout.  A dataset_switch_frac
    slice changes command mid-episode (often from standing, sometimes a
    reversal) because deployment replans across exactly those moments;
    windows near every command change are taken at stride 1 since the
    transient lasts a few ticks and would otherwise land in roughly one
    window per episode.
    """
    params_base = EnvParams()
    master = np.random.default_rng(cfg.dataset_seed)
    segments = []
    episode_of = []
    ep_cmd = np.zeros((cfg.dataset_episodes, 3))
    ep_switch = np.full(cfg.dataset_episodes, -1.0)
    ep_return = np.zeros(cfg.dataset_episodes)
    ep_steps = np.zeros(cfg.dataset_episodes)
    track_task = sim.Task("track")
    falls = 0

    for ep in range(cfg.dataset_episodes):
        switch_t = None
        cmd0 = None
        if master.random() < cfg.dataset_stand_frac:
            cmd = (0.0, 0.0, 0.0)
        else:
            cmd = _draw_command(master, cfg)
            if master.random() < cfg.dataset_switch_frac:
                switch_t = int(master.integers(_SWITCH_LO, _SWITCH_HI + 1))
                cmd0 = (0.0, 0.0, 0.0) if master.random() < 0.4 \
                    else _draw_command(master, cfg)
        freq = float(master.uniform(cfg.dataset_freq_min, cfg.dataset_freq_max))
        offset = float(master.uniform(-cfg.dataset_posture_jitter,
                                      cfg.dataset_posture_jitter))
        demo_seed = int(master.integers(0, 2**31 - 1))

        eseed = cfg.dataset_seed * _SEED_CELL_EP + ep
        start_cmd = cmd if switch_t is None else cmd0
        params, state = sim.reset(eseed, cfg.env_randomize, base=params_base,
                                  v_cmd=start_cmd)
        demo = Demonstrator(params, seed=demo_seed, gait_freq=freq,
                            posture_offset=offset)
        command_fn = None
        if switch_t is not None:
            command_fn = (lambda t, a=cmd0, b=cmd, s=switch_t:
                          a if t < s else b)
        rec = sim.rollout(demo, params, state, cfg.dataset_steps,
                          command_fn=command_fn, seed=eseed)
        falls += int(rec.terminated)
        pairs = rec.pairs()
        windows = window_rollout(pairs, cfg.dataset_horizon,
                                 cfg.dataset_stride)
        if cmd != (0.0, 0.0, 0.0):
            centers = [0] if switch_t is None else [0, switch_t]
            starts = _dense_starts(len(pairs), cfg.dataset_horizon,
                                   cfg.dataset_stride, centers)
            windows.extend(_windows_at(pairs, cfg.dataset_horizon, starts))
        segments.extend(windows)
        episode_of.extend([ep] * len(windows))
        ep_cmd[ep] = cmd
        ep_switch[ep] = -1.0 if switch_t is None else float(switch_t)
        ep_return[ep] = sim.realized_return(rec, track_task)
        ep_steps[ep] = rec.n_steps

    layout = params_base.layout
    meta = DatasetMeta(n_state=layout.n_state, n_action=layout.n_action,
                       horizon=cfg.dataset_horizon, dt=params_base.dt,
                       source=f"demonstrator seed {cfg.dataset_seed}")
    ds = TrajectoryDataset.from_segments(segments, meta, aux={
        "episode": np.asarray(episode_of, dtype=np.float64),
        "ep_cmd": ep_cmd,
        "ep_switch": ep_switch,
        "ep_return": ep_return,
        "ep_steps": ep_steps,
    })
    os.makedirs(os.path.dirname(cfg.dataset_path) or ".", exist_ok=True)
    save_dataset(cfg.dataset_path, ds)
    write_resolved(cfg, cfg.dataset_path)
    return {
        "path": cfg.dataset_path,
        "episodes": cfg.dataset_episodes,
        "segments": len(ds),
        "falls": falls,
        "hash": file_hash(cfg.dataset_path),
    }


# ---------------------------------------------------------------- training

def cmd_train_prior(cfg: RunConfig) -> dict:
    ds = load_dataset(cfg.dataset_path)
    schedule = make_schedule(cfg.model_levels, cfg.model_beta_start,
                             cfg.model_beta_end)
    den, history = fit_denoiser(
        ds.normalized(), schedule, hidden=cfg.model_hidden,
        steps=cfg.model_train_steps, batch_size=cfg.model_batch,
        lr=cfg.model_lr, seed=cfg.model_seed, embed_dim=cfg.model_embed_dim)
    os.makedirs(os.path.dirname(cfg.model_path) or ".", exist_ok=True)
    save_denoiser(cfg.model_path, den, schedule, ds.stats, extra_meta={
        "config": config_hash(cfg),
        "dataset": file_hash(cfg.dataset_path),
        "stage": "prior",
    })
    write_resolved(cfg, cfg.model_path)
    return {
        "path": cfg.model_path,
        "steps": len(history),
        "final_loss": history[-1][1],
        "final_smoothed": history[-1][2],
        "hash": file_hash(cfg.model_path),
    }


def cmd_train_reward(cfg: RunConfig) -> dict:
    ds = load_dataset(cfg.dataset_path)
    schedule = make_schedule(cfg.model_levels, cfg.model_beta_start,
                             cfg.model_beta_end)
    params = EnvParams()
    segments = ds.data.astype(np.float64)
    labels = tasklib.height_labels(segments, params.layout, params)
    model, history = train_reward_model(
        segments, labels, ds.stats, schedule, hidden=cfg.reward_hidden,
        steps=cfg.reward_train_steps, batch_size=cfg.reward_batch,
        lr=cfg.reward_lr, seed=cfg.reward_seed,
        embed_dim=cfg.model_embed_dim)
    os.makedirs(os.path.dirname(cfg.reward_path) or ".", exist_ok=True)
    save_reward_model(cfg.reward_path, model)
    write_resolved(cfg, cfg.reward_path)
    return {
        "path": cfg.reward_path,
        "steps": len(history),
        "final_loss": history[-1][1],
        "hash": file_hash(cfg.reward_path),
    }


def cmd_finetune(cfg: RunConfig) -> dict:
    den, schedule, stats, _ = load_denoiser(cfg.model_path)
    layout = _layout_for(den)
    parent = file_hash(cfg.model_path)
    icfg = InteractiveConfig(
        iterations=cfg.trainer_iterations,
        episodes_per_iter=cfg.trainer_episodes,
        episode_steps=cfg.trainer_steps,
        stride=cfg.trainer_stride,
        batch_size=cfg.trainer_batch,
        mix_fresh=cfg.trainer_mix_fresh,
        temperature=cfg.trainer_temperature
        if cfg.trainer_temperature > 0 else None,
        temp_floor=cfg.trainer_temp_floor,
        recent_window=cfg.trainer_window,
        buffer_capacity=cfg.trainer_buffer,
        lr=cfg.trainer_lr,
        speed_limit=cfg.trainer_speed_limit,
        speed_floor=cfg.trainer_speed_floor,
        yaw_limit=cfg.trainer_yaw_limit,
        randomize=cfg.trainer_randomize,
        uniform_weights=cfg.trainer_uniform,
        plan_every=cfg.trainer_plan_every,
        seed=cfg.trainer_seed,
    )
    preset = tasklib.make_task("track")
    # rollouts rank candidates by command consistency; no gradient guidance
    pcfg = PlannerConfig(n_candidates=cfg.trainer_candidates,
                         n_inference=10, reward=preset.reward)
    curve = train_interactive(den, schedule, stats, layout, preset.task, icfg,
                              planner_cfg=pcfg)
    os.makedirs(os.path.dirname(cfg.trainer_out) or ".", exist_ok=True)
    save_denoiser(cfg.trainer_out, den, schedule, stats, extra_meta={
        "config": config_hash(cfg),
        "parent": parent,
        "stage": "finetuned",
    })
    write_resolved(cfg, cfg.trainer_out)
    columns = ["iteration", "mean_return", "stability", "tracking_error",
               "loss", "temperature"]
    rows = [[point[c] for c in columns] for point in curve]
    write_csv(cfg.trainer_curve,
              [f"config sha256:{config_hash(cfg)}",
               f"parent sha256:{parent}"],
              columns, rows)
    return {
        "path": cfg.trainer_out,
        "curve": cfg.trainer_curve,
        "iterations": len(curve),
        "final_stability": curve[-1]["stability"] if curve else float("nan"),
        "hash": file_hash(cfg.trainer_out),
    }


# ---------------------------------------------------------------- planning

def _planner_config(preset, n_candidates: int, use_reward: bool,
                    use_constraints: bool, n_inference: int,
                    deterministic: bool = False,
                    guide_scale: float = -1.0) -> PlannerConfig:
    """Grid-cell planner settings.

    The reward spec always rides along for candidate ranking; reward
    planning proper (gradient guidance) is what use_reward toggles.
    """
    if use_reward:
        gain = guide_scale if guide_scale >= 0.0 else preset.guide_scale
    else:
        gain = 0.0
    return PlannerConfig(
        n_candidates=n_candidates,
        guide_scale=gain,
        reward=preset.reward,
        constraints=preset.constraints if use_constraints else ConstraintSet(),
        n_inference=n_inference,
        deterministic=deterministic,
    )


def planned_rollout(denoiser, schedule, stats, layout, planner_cfg, params,
                    state, n_steps: int, plan_every: int, seed: int,
                    warm_margin: int = 0):
    """Receding-horizon episode: replan every plan_every steps, execute
    the plan's action columns in between.  warm_margin > 0 re-enters the
    chain from the shifted previous plan instead of replanning cold."""
    horizon = denoiser.horizon
    sched_inf = respace(schedule, planner_cfg.n_inference)
    cache = {"plan": None, "at": 0}

    def policy(st, pr):
        idx = cache["at"]
        if cache["plan"] is None or idx >= min(plan_every, horizon):
            obs = sim.observation(st, pr)
            init, start = (None, None)
            if warm_margin > 0 and cache["plan"] is not None:
                init, start = warm_start(cache["plan"].data, idx,
                                         sched_inf, warm_margin)
            res = guided_sample(denoiser, schedule, planner_cfg, obs,
                                seed * _SEED_CELL_EP + st.t, stats=stats,
                                layout=layout, init_clean=init,
                                start_level=start)
            cache["plan"] = res.best
            cache["at"] = 0
            idx = 0
        cache["at"] = idx + 1
        return cache["plan"].actions[:, idx]

    return sim.rollout(policy, params, state, n_steps, seed=seed)


def cmd_plan(cfg: RunConfig) -> dict:
    den, schedule, stats, _ = load_denoiser(cfg.planner_model)
    layout = _layout_for(den)
    rm = None
    if cfg.planner_task == "height":
        if not cfg.eval_reward_model:
            raise ValueError("the height task needs eval_reward_model set")
        rm = load_reward_model(cfg.eval_reward_model)
    preset = tasklib.make_task(cfg.planner_task, EnvParams(), reward_model=rm)
    pcfg = _planner_config(preset, cfg.planner_candidates,
                           cfg.planner_use_reward, cfg.planner_use_constraints,
                           cfg.planner_n_inference, cfg.planner_deterministic,
                           cfg.planner_guide_scale)
    params, state = sim.reset(cfg.planner_seed, cfg.env_randomize,
                              v_cmd=preset.eval_command)
    obs = sim.observation(state, params)
    res = guided_sample(den, schedule, pcfg, obs, cfg.planner_seed,
                        stats=stats, layout=layout)
    diag = res.diagnostics
    lines = [
        f"plan task {cfg.planner_task}",
        f"plan config sha256:{config_hash(cfg)}",
        f"plan model sha256:{file_hash(cfg.planner_model)}",
        f"plan candidates {cfg.planner_candidates}",
        f"plan selected_index {res.selected_index}",
        f"plan n_reverse_steps {diag['n_reverse_steps']}",
        f"plan s0_violation {diag['s0_violation']!r}",
        f"plan discarded {len(diag['discarded'])}",
    ]
    for i, r in enumerate(res.all_rewards):
        lines.append(f"plan reward {i} {r!r}")
    for name, series in (("guidance_norm", diag["guidance_norm"]),
                         ("violation_pre", diag["violation_pre"]),
                         ("violation_post", diag["violation_post"])):
        flat = ",".join(repr(float(v)) for v in np.ravel(series)) \
            if len(series) else ""
        lines.append(f"plan {name} {flat}")
    for t in range(res.best.horizon):
        col = ",".join(repr(float(v)) for v in res.best.actions[:, t])
        lines.append(f"plan action {t} {col}")
    os.makedirs(os.path.dirname(cfg.planner_out) or ".", exist_ok=True)
    with open(cfg.planner_out, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
    write_resolved(cfg, cfg.planner_out)
    return {
        "path": cfg.planner_out,
        "selected_index": res.selected_index,
        "reward": res.all_rewards[res.selected_index],
    }


# ---------------------------------------------------------------- eval grid

def _eval_cell(den, schedule, stats, layout, preset, pcfg, cfg: RunConfig,
               base_seed: int):
    pens = np.zeros(cfg.eval_seeds)
    tracks = np.zeros(cfg.eval_seeds)
    fells = np.zeros(cfg.eval_seeds, dtype=bool)
    steps = np.zeros(cfg.eval_seeds, dtype=np.int64)
    for s in range(cfg.eval_seeds):
        seed = base_seed + s
        params, state = sim.reset(seed, cfg.eval_randomize,
                                  v_cmd=preset.eval_command)
        rec = planned_rollout(den, schedule, stats, layout, pcfg, params,
                              state, cfg.eval_steps, cfg.eval_plan_every,
                              seed)
        pens[s] = float(np.mean(preset.task.penalty_series(rec)))
        tracks[s] = float(np.mean(preset.task.tracking_series(rec)))
        fells[s] = rec.terminated
        steps[s] = rec.n_steps
    return pens, tracks, fells, steps


def cmd_eval_adaptation(cfg: RunConfig) -> dict:
    den, schedule, stats, _ = load_denoiser(cfg.eval_model)
    layout = _layout_for(den)
    model_hash = file_hash(cfg.eval_model)
    names = [t.strip() for t in cfg.eval_tasks.split(",") if t.strip()]
    rm = None
    rm_hash = ""
    if "height" in names:
        if not cfg.eval_reward_model:
            raise ValueError("the height task needs eval_reward_model set")
        rm = load_reward_model(cfg.eval_reward_model)
        rm_hash = file_hash(cfg.eval_reward_model)

    cells = _declared_cells(cfg)
    table_rows = []
    long_rows = []
    summary = {}
    for ti, name in enumerate(names):
        preset = tasklib.make_task(name, EnvParams(), reward_model=rm)
        base_seed = cfg.eval_seed * _SEED_CELL_EP + ti * _SEED_TASK
        bcfg = _planner_config(preset, 1, False, False, 10)
        base = _eval_cell(den, schedule, stats, layout, preset, bcfg, cfg,
                          base_seed + _SEED_BASELINE)
        base_pen = max(float(np.mean(base[0])), 1e-12)
        base_track = max(float(np.mean(base[1])), 1e-12)
        row = [name, 1.0]
        for s in range(cfg.eval_seeds):
            long_rows.append([name, "baseline", 1, False, False,
                              s, base[0][s], base[1][s], base[3][s],
                              base[2][s]])
        for label, n_cand, use_r, use_c in cells:
            pcfg = _planner_config(preset, n_cand, use_r, use_c, 10)
            pens, tracks, fells, steps = _eval_cell(
                den, schedule, stats, layout, preset, pcfg, cfg, base_seed)
            ratio = float(np.mean(tracks)) / base_track
            gate_ok = ratio >= cfg.eval_tracking_gate
            norm = float(np.mean(pens)) / base_pen
            row.append(norm if gate_ok else float("nan"))
            summary[(name, label)] = {
                "norm_penalty": norm,
                "tracking_ratio": ratio,
                "gate_pass": gate_ok,
            }
            for s in range(cfg.eval_seeds):
                long_rows.append([name, label, n_cand, use_r, use_c,
                                  s, pens[s], tracks[s], steps[s], fells[s]])
        table_rows.append(row)

    comments = [
        f"config sha256:{config_hash(cfg)}",
        f"model sha256:{model_hash}",
        f"reward_model sha256:{rm_hash}" if rm_hash else "reward_model none",
        f"seeds {cfg.eval_seeds} steps {cfg.eval_steps} "
        f"plan_every {cfg.eval_plan_every}",
        "normalized penalty per cell; nan marks a tracking-gate rejection",
    ]
    columns = ["objective", "baseline"] + [label for label, *_ in cells]
    os.makedirs(os.path.dirname(cfg.eval_out) or ".", exist_ok=True)
    write_csv(cfg.eval_out, comments, columns, table_rows)
    seeds_path = _seeds_path(cfg.eval_out)
    write_csv(seeds_path, comments,
              ["task", "config", "candidates", "reward", "constraints",
               "seed", "penalty", "tracking", "steps", "fell"], long_rows)
    write_resolved(cfg, cfg.eval_out)
    return {
        "path": cfg.eval_out,
        "seeds_path": seeds_path,
        "tasks": names,
        "summary": summary,
    }


def _declared_cells(cfg: RunConfig):
    cells = []
    for n in cfg.eval_candidates:
        cells.append((f"C{n}_Roff_Coff", int(n), False, False))
    for n in cfg.eval_candidates:
        cells.append((f"C{n}_Ron_Coff", int(n), True, False))
    cells.append((f"C{int(cfg.eval_candidates[0])}_Roff_Con",
                  int(cfg.eval_candidates[0]), False, True))
    return cells


def _seeds_path(table_path: str) -> str:
    root, ext = os.path.splitext(table_path)
    return f"{root}_seeds{ext or '.csv'}"


# ---------------------------------------------------------------- deployment

DEPLOY_CONFIGS = (
    # label, margin, cached, n_inference, deterministic, refresh_every?, on_cmd
    ("A", 0, 0, 10, False, None, False),
    ("B", 0, 7, 10, False, None, False),
    ("C", 0, 0, 3, True, None, False),
    ("D", 3, 7, 10, False, None, False),
    ("E", 3, 7, 10, False, "period", True),
)


def _make_plan_fn(den, schedule, stats, layout, n_inference: int,
                  deterministic: bool):
    def plan_fn(obs, seed, init_clean, start_level):
        pcfg = PlannerConfig(n_candidates=1, n_inference=n_inference,
                             deterministic=deterministic)
        res = guided_sample(den, schedule, pcfg, obs, seed, stats=stats,
                            layout=layout, init_clean=init_clean,
                            start_level=start_level)
        return res.best.data
    return plan_fn


def _phase_quality(record, gate: float, settle: int = 50):
    """Per-phase mean tracking and pass flags for the deployment script.

    A phase passes when the episode survives it and the post-transient
    tracking metric clears the gate.
    """
    verr2 = record.components["verr2"]
    n = len(verr2)
    out = []
    for label, sl in tasklib.script_phase_slices():
        end = sl.stop
        window = verr2[sl.start + settle:end]
        if n < end or len(window) == 0:
            out.append((label, float("nan"), False))
            continue
        track = float(np.mean(np.exp(-window / 0.25)))
        out.append((label, track, track >= gate))
    return out


def cmd_ablate_deploy(cfg: RunConfig) -> dict:
    den, schedule, stats, _ = load_denoiser(cfg.executor_model)
    layout = _layout_for(den)
    model_hash = file_hash(cfg.executor_model)
    rows = []
    results = {}
    for idx, (label, margin, cached, n_inf, det, refresh, on_cmd) in \
            enumerate(DEPLOY_CONFIGS):
        xcfg = ExecutorConfig(
            horizon=cfg.executor_horizon,
            margin=margin,
            cached_steps=cached,
            n_inference=n_inf,
            refresh_every=cfg.executor_refresh_every
            if refresh == "period" else None,
            refresh_on_command=on_cmd,
            control_period=cfg.executor_control_period,
            step_cost=cfg.executor_step_cost,
            stall_factor=cfg.executor_stall_factor,
        )
        plan_fn = _make_plan_fn(den, schedule, stats, layout, n_inf, det)
        sched_inf = respace(schedule, n_inf)
        seed = cfg.executor_seed * 104729 + idx

        # steady-state run for the timing statistics
        cmd = (cfg.executor_measure_speed, 0.0, 0.0)
        params, state = sim.reset(seed, cfg.env_randomize, v_cmd=cmd)
        meas = deploy(plan_fn, xcfg, params, state,
                      cfg.executor_measure_ticks, seed=seed,
                      sched_inf=sched_inf, threaded=cfg.executor_threaded)
        timing = measure(meas.buffer, xcfg)

        # scripted run for the phase-quality pattern
        params, state = sim.reset(seed + 1, cfg.env_randomize,
                                  v_cmd=tasklib.deploy_script(0))
        scripted = deploy(plan_fn, xcfg, params, state, tasklib.SCRIPT_TICKS,
                          command_fn=tasklib.deploy_script, seed=seed + 1,
                          sched_inf=sched_inf, threaded=cfg.executor_threaded)
        phases = _phase_quality(scripted.record, cfg.executor_phase_gate)
        row = [label, margin, cached, n_inf, det,
               cfg.executor_refresh_every if refresh == "period" else 0,
               on_cmd, timing["frequency_hz"], timing["latency_ms"],
               timing["deadline_misses"], scripted.record.terminated]
        for _, track, ok in phases:
            row.extend([track, ok])
        rows.append(row)
        results[label] = {
            "frequency_hz": timing["frequency_hz"],
            "latency_ms": timing["latency_ms"],
            "phases": {name: ok for name, _, ok in phases},
            "phase_tracking": {name: track for name, track, _ in phases},
            "fell": scripted.record.terminated,
        }

    columns = ["config", "margin", "cached", "n_inference", "ddim",
               "refresh_every", "refresh_on_command", "frequency_hz",
               "latency_ms", "deadline_misses", "fell"]
    for label, _ in tasklib.script_phase_slices():
        columns.extend([f"{label}_tracking", f"{label}_pass"])
    comments = [
        f"config sha256:{config_hash(cfg)}",
        f"model sha256:{model_hash}",
        f"measure_ticks {cfg.executor_measure_ticks} "
        f"script_ticks {tasklib.SCRIPT_TICKS} "
        f"phase_gate {cfg.executor_phase_gate!r}",
    ]
    os.makedirs(os.path.dirname(cfg.executor_out) or ".", exist_ok=True)
    write_csv(cfg.executor_out, comments, columns, rows)
    write_resolved(cfg, cfg.executor_out)
    return {"path": cfg.executor_out, "results": results}


# ---------------------------------------------------------------- plotting

def read_csv(path):
    """Read one of this module's CSVs: (comments, columns, string rows)."""
    comments, columns, rows = [], None, []
    with open(path, "r", encoding="ascii") as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if line.startswith("#"):
                comments.append(line[1:].strip())
            elif columns is None:
                columns = line.split(",")
            elif line:
                rows.append(line.split(","))
    if columns is None:
        raise ValueError(f"{path}: no header row")
    return comments, columns, rows


def cmd_plot(cfg: RunConfig) -> dict:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "diffplan"

    comments, columns, rows = read_csv(cfg.plot_source)
    fig, ax = plt.subplots(figsize=(8.0, 4.5))
    if columns[0] == "objective":
        labels = columns[1:]
        x = np.arange(len(labels))
        width = 0.8 / max(len(rows), 1)
        for i, row in enumerate(rows):
            vals = [float(v) for v in row[1:]]
            ax.bar(x + i * width, vals, width, label=row[0])
        ax.set_xticks(x + 0.4 - width / 2.0)
        ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
        ax.set_ylabel("normalized penalty")
        ax.axhline(1.0, color="gray", lw=0.8, ls="--")
        ax.legend(fontsize=8)
    elif columns[0] == "config":
        labels = [row[0] for row in rows]
        freq = [float(row[columns.index("frequency_hz")]) for row in rows]
        lat = [float(row[columns.index("latency_ms")]) for row in rows]
        x = np.arange(len(labels))
        ax.bar(x - 0.2, freq, 0.4, label="frequency (Hz)")
        ax2 = ax.twinx()
        ax2.bar(x + 0.2, lat, 0.4, color="tab:orange", label="latency (ms)")
        ax.set_xticks(x)
        ax.set_xticklabels(labels)
        ax.set_ylabel("frequency (Hz)")
        ax2.set_ylabel("latency (ms)")
        ax.legend(loc="upper left", fontsize=8)
        ax2.legend(loc="upper right", fontsize=8)
    elif columns[0] == "iteration":
        it = [float(row[0]) for row in rows]
        stab = [float(row[columns.index("stability")]) for row in rows]
        ret = [float(row[columns.index("mean_return")]) for row in rows]
        ax.plot(it, stab, label="stability")
        ax.set_ylabel("stability")
        ax2 = ax.twinx()
        ax2.plot(it, ret, color="tab:orange", label="mean return")
        ax2.set_ylabel("mean return")
        ax.set_xlabel("iteration")
        ax.legend(loc="upper left", fontsize=8)
        ax2.legend(loc="lower right", fontsize=8)
    else:
        plt.close(fig)
        raise ValueError(f"{cfg.plot_source}: unrecognized CSV schema "
                         f"(first column {columns[0]!r})")
    fig.tight_layout()
    os.makedirs(os.path.dirname(cfg.plot_out) or ".", exist_ok=True)
    fig.savefig(cfg.plot_out, format="svg", metadata={"Date": None})
    plt.close(fig)
    write_resolved(cfg, cfg.plot_out)
    return {"path": cfg.plot_out, "source": cfg.plot_source}
