"""Two-stage training (teacher with clean perception, student with noisy
map-derived perception) and evaluation sweeps."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import envsim
from .algo import (DPPOConfig, Optimizers, RolloutBuffer, compute_gae, dppo_update, ppo_update)
from .config import RunConfig, content_hash, dumps
from .envsim import NoiseSpec, TerrainBatch
from .mapping import ElevationMap, map_scan_batch, scan_into_map_batch
from .net import (CheckpointError, NonFiniteError, PolicyNet, ValueNet, gaussian_logprob_entropy,
                  load_checkpoint, sample_actions, save_checkpoint, transfer_params)
from .rewards import compute_rewards
from .terrain import ConfigError, TerrainKind, TerrainSpec, generate_heightmap

METRIC_COLUMNS = ("update", "mean_return", "mean_reward", "episodes", "fall_rate", "trips_per_step",
                  "cmd_x", "cmd_y", "cmd_yaw", "flat_share", "L_dist", "L_PPO", "L_total",
                  "value_loss", "clip_frac", "approx_kl", "entropy", "grad_norm", "skipped")
EVAL_COLUMNS = ("kind", "noise", "episodes", "mean_return", "cmd_x", "cmd_y", "cmd_yaw", "err_x",
                "err_y", "err_yaw", "trip_rate", "fall_rate", "episode_len", "seeds")
TRAJ_COLUMNS = ("step", "phase", "x", "y", "z", "roll", "pitch", "yaw", "cmd_x", "cmd_y", "cmd_yaw",
                "v_x", "v_y", "v_yaw", "force_left", "force_right", "speed_left", "speed_right",
                "trip_count", "done")


class DivergenceError(RuntimeError):
    """Training produced non-finite values; the message names the update."""


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def append_csv(path, columns, row) -> None:
    with open(path, "a", newline="", encoding="utf-8") as f:
        csv.writer(f, lineterminator="\n").writerow([_fmt(row[c]) for c in columns])


def file_sha1(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha1(f.read()).hexdigest()


def validate_run(run: RunConfig) -> None:
    """Cross-section checks that no single dataclass can make."""
    if run.net.obs_dim != envsim.OBS_DIM:
        raise ConfigError(f"[net] observation size {run.net.obs_dim} does not match the environment "
                          f"({envsim.OBS_DIM})")
    if run.net.action_dim != envsim.N_JOINTS:
        raise ConfigError(f"[net] action_dim must be {envsim.N_JOINTS}")
    if run.stage.stage == "teacher" and (run.noise.enabled or run.noise.grid > 0 or run.stage.map_pipeline):
        raise ConfigError("[stage] the teacher stage uses clean perception: zero [noise] and map_pipeline = false")


def curriculum_weights(stage, update: int) -> np.ndarray:
    """Terrain mix over ``stage.kinds``: Flat starts at ``flat_start`` and the
    mix moves linearly to uniform by ``curriculum_updates``."""
    kinds = stage.kinds
    k = len(kinds)
    uniform = np.full(k, 1.0 / k)
    if "flat" not in kinds or k == 1 or stage.curriculum_updates == 0:
        return uniform
    start = np.full(k, (1.0 - stage.flat_start) / (k - 1))
    start[kinds.index("flat")] = stage.flat_start
    frac = min(1.0, update / stage.curriculum_updates)
    return (1.0 - frac) * start + frac * uniform


@dataclass(frozen=True)
class Perception:
    """How the acting policy perceives: proprio noise, grid noise, map or truth."""

    noise: NoiseSpec = field(default_factory=NoiseSpec)
    grid_sigma: float = 0.0
    use_map: bool = False

    @property
    def clean(self) -> bool:
        return not (self.noise.enabled or self.grid_sigma > 0 or self.use_map or self.noise.persistent)


class VecEnv:
    """Batch of environments with per-env seeded streams (reset, action,
    observation noise, map scan) split from one master seed."""

    def __init__(self, run: RunConfig, num_envs: int, seed_seq: np.random.SeedSequence,
                 perception: Perception):
        self.run = run
        self.cfg = run.env
        self.n = num_envs
        self.perception = perception
        streams = [c.spawn(4) for c in seed_seq.spawn(num_envs)]
        self.reset_rngs = [np.random.default_rng(s[0]) for s in streams]
        self.action_rngs = [np.random.default_rng(s[1]) for s in streams]
        self.noise_rngs = [np.random.default_rng(s[2]) for s in streams]
        self.map_rngs = [np.random.default_rng(s[3]) for s in streams]
        g = run.terrain.geometry()
        self.geometry = g
        self.terrain = TerrainBatch(np.zeros((num_envs, g.height_cells, g.width_cells)), g.resolution, g.origin)
        self.kinds = ["flat"] * num_envs
        self._cache: dict[str, np.ndarray] = {}
        m = run.mapping
        self.sensor = m.sensor()
        self.emap = (ElevationMap.empty(m.geometry(), m.prior_height, m.prior_var, batch=num_envs)
                     if perception.use_map else None)
        self.state: envsim.RobotState | None = None
        self.ep_return = np.zeros(num_envs)
        self.ep_len = np.zeros(num_envs, dtype=np.int64)

    def _heights(self, kind: str, rng) -> np.ndarray:
        seed = int(rng.integers(2**63))
        if kind != TerrainKind.ROUGH.value and kind in self._cache:
            return self._cache[kind]
        t = self.run.terrain
        hm = generate_heightmap(TerrainSpec(TerrainKind(kind), t.params(), seed, self.geometry))
        if kind != TerrainKind.ROUGH.value:
            self._cache[kind] = hm.heights
        return hm.heights

    def reset(self, envs, kinds, weights=None) -> None:
        """Reset ``envs``; each draws its terrain kind from ``kinds`` with
        ``weights`` using its own reset stream."""
        envs = np.asarray(envs, dtype=np.int64)
        if len(envs) == 0:
            return
        for i in envs:
            rng = self.reset_rngs[i]
            kind = kinds[0] if len(kinds) == 1 else kinds[int(rng.choice(len(kinds), p=weights))]
            self.kinds[i] = kind
            self.terrain.heights[i] = self._heights(kind, rng)
        sub = TerrainBatch(self.terrain.heights[envs], self.terrain.resolution, self.terrain.origin)
        fresh = envsim.reset_batch([self.reset_rngs[i] for i in envs], sub, self.cfg, self.perception.noise)
        if self.state is None:
            if len(envs) != self.n:
                raise ValueError("the first reset must cover every environment")
            self.state = fresh
        else:
            self.state.put(envs, fresh)
        self.ep_return[envs] = 0.0
        self.ep_len[envs] = 0
        if self.emap is not None:
            self.emap.reset(envs)

    def refresh_map(self, envs=None) -> None:
        """Fuse a synthetic depth scan for envs whose step count hits the scan cadence."""
        if self.emap is None:
            return
        st = self.state
        if envs is None:
            envs = np.flatnonzero(st.step % self.run.mapping.scan_every == 0)
        x, y, z = st.base_pos.T
        scan_into_map_batch(self.emap, self.terrain.heights, self.geometry, x, y, z, st.base_rpy[:, 2],
                            self.sensor, self.map_rngs, envs)

    def clean_obs(self, envs=None) -> np.ndarray:
        st = self.state if envs is None else self.state.take(envs)
        tb = self.terrain if envs is None else TerrainBatch(self.terrain.heights[envs], self.terrain.resolution,
                                                            self.terrain.origin)
        return envsim.build_observation(st, envsim.true_scan_batch(tb, st, self.cfg), self.cfg).flat()

    def observe(self) -> tuple[np.ndarray, np.ndarray]:
        """(actor observation, clean observation) for every env."""
        st, cfg, p = self.state, self.cfg, self.perception
        true_scan = envsim.true_scan_batch(self.terrain, st, cfg)
        clean = envsim.build_observation(st, true_scan, cfg).flat()
        if p.clean:
            return clean, clean
        if p.use_map:
            x, y, z = st.base_pos.T
            scan = map_scan_batch(self.emap, x, y, st.base_rpy[:, 2], z, cfg.scan_spacing, p.grid_sigma,
                                  self.map_rngs)
        elif p.grid_sigma > 0:
            scan = true_scan + p.grid_sigma * np.stack([r.standard_normal(true_scan.shape[1])
                                                        for r in self.map_rngs])
        else:
            scan = true_scan
        actor = envsim.build_observation(st, scan, cfg, p.noise, self.noise_rngs).flat()
        return actor, clean

    def step(self, actions):
        new, info, done, timeout = envsim.step(self.state, actions, self.terrain, self.cfg)
        br = compute_rewards(info, self.run.rewards, self.cfg)
        self.state = new
        self.ep_return += br.total
        self.ep_len += 1
        return br, info, done, timeout


def _net_seeds(seed_seq) -> tuple[int, int]:
    a, b = seed_seq.spawn(2)
    return int(a.generate_state(1)[0]), int(b.generate_state(1)[0])


@dataclass
class StageResult:
    out_dir: Path
    policy_path: Path
    value_path: Path
    metrics_path: Path
    rows: list = field(default_factory=list)


class _Trainer:
    def __init__(self, run: RunConfig, out_dir, perception: Perception, teacher: PolicyNet | None = None):
        validate_run(run)
        self.run = run
        self.out = Path(out_dir)
        root = np.random.SeedSequence(run.stage.seed)
        env_ss, trainer_ss, net_ss = root.spawn(3)
        ps, vs = _net_seeds(net_ss)
        self.policy = PolicyNet(run.net, ps, prefix="policy")
        self.value = ValueNet(run.net, vs, prefix="value")
        self.teacher = teacher
        self.rng = np.random.default_rng(trainer_ss)
        self.venv = VecEnv(run, run.stage.num_envs, env_ss, perception)
        self.opt = None
        self.recent_returns: list[float] = []

    def _rollout(self, update: int) -> tuple[RolloutBuffer, dict]:
        run, venv = self.run, self.venv
        h, n = run.stage.horizon, venv.n
        buf = RolloutBuffer.allocate(h, n, run.net.obs_dim, run.net.action_dim, separate_critic=True)
        if self.teacher is not None:
            # the privileged critic already stores the clean view the teacher labels
            buf.teacher_obs = buf.critic_obs if run.stage.privileged_critic else np.zeros_like(buf.obs)
        weights = curriculum_weights(run.stage, update)
        kinds = run.stage.kinds
        raw = np.zeros((h, n))
        cmd = np.zeros(3)
        trips = 0
        finished, falls = [], 0
        for t in range(h):
            actor, clean = venv.observe()
            mean, log_std, _ = self.policy.forward(actor)
            actions = sample_actions(mean, log_std, venv.action_rngs)
            logp, _ = gaussian_logprob_entropy(mean, log_std, actions)
            critic = clean if run.stage.privileged_critic else actor
            v, _ = self.value.forward(critic)
            if self.teacher is not None and not run.stage.privileged_critic:
                buf.teacher_obs[t] = clean
            br, info, done, timeout = venv.step(actions)
            buf.obs[t], buf.critic_obs[t], buf.actions[t], buf.logp[t] = actor, critic, actions, logp
            buf.values[t], buf.dones[t], buf.timeouts[t] = v, done, timeout
            raw[t] = br.total
            cmd += [br.raw["command_x"].mean(), br.raw["command_y"].mean(), br.raw["command_yaw"].mean()]
            trips += int(info["trips"].sum())
            if timeout.any():
                idx = np.flatnonzero(timeout)
                term = venv.clean_obs(idx) if run.stage.privileged_critic else venv.observe()[0][idx]
                buf.terminal_values[t, idx] = self.value.forward(term)[0]
            ended = np.flatnonzero(done | timeout)
            if len(ended):
                finished.extend(venv.ep_return[ended].tolist())
                falls += int(done[ended].sum())
                venv.reset(ended, kinds, weights)
            venv.refresh_map()
        actor, clean = venv.observe()
        bootstrap = self.value.forward(clean if run.stage.privileged_critic else actor)[0]
        buf.rewards = raw * run.ppo.reward_scale
        buf.advantages, buf.returns = compute_gae(buf.rewards, buf.values, buf.dones, buf.timeouts, bootstrap,
                                                  run.ppo.gamma, run.ppo.lam, buf.terminal_values)
        if finished:
            mean_return = float(np.mean(finished))
        else:
            # no episode ended in this rollout: report the mean partial return
            mean_return = float(np.mean(venv.ep_return))
        stats = {"mean_return": mean_return, "mean_reward": float(raw.mean()), "episodes": len(finished),
                 "fall_rate": falls / len(finished) if finished else 0.0, "trips_per_step": trips / (h * n),
                 "cmd_x": cmd[0] / h, "cmd_y": cmd[1] / h, "cmd_yaw": cmd[2] / h,
                 "flat_share": float(weights[kinds.index("flat")]) if "flat" in kinds else 0.0}
        return buf, stats

    def _update(self, buf) -> dict:
        raise NotImplementedError

    def _save(self, tag: str) -> tuple[Path, Path]:
        p = self.out / f"policy{tag}.ckpt"
        v = self.out / f"value{tag}.ckpt"
        save_checkpoint(self.policy.store, p)
        save_checkpoint(self.value.store, v)
        return p, v

    def _manifest(self, extra: dict) -> None:
        text = dumps(self.run)
        lines = ["# run manifest", f"# stage = {self.run.stage.stage}", f"# seed = {self.run.stage.seed}",
                 f"# config_sha1 = {content_hash(text)}"]
        lines += [f"# {k} = {v}" for k, v in extra.items()]
        with open(self.out / "manifest.txt", "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n" + text)

    def train(self, extra_manifest=None) -> StageResult:
        self.out.mkdir(parents=True, exist_ok=True)
        self._manifest(extra_manifest or {})
        run = self.run
        self.venv.reset(np.arange(self.venv.n), run.stage.kinds, curriculum_weights(run.stage, 0))
        self.venv.refresh_map()
        self.opt = Optimizers.create(self.policy, self.value)
        rows = []
        metrics_path = self.out / "metrics.csv"
        write_csv(metrics_path, METRIC_COLUMNS, [])
        for u in range(run.stage.updates):
            try:
                buf, stats = self._rollout(u)
                if not np.isfinite(stats["mean_return"]):
                    raise DivergenceError(f"non-finite mean return at update {u}")
                upd = self._update(buf)
            except NonFiniteError as exc:
                raise DivergenceError(f"non-finite values at update {u}: {exc}") from None
            row = {"update": u, **stats, **upd}
            if not all(np.isfinite(row[c]) for c in METRIC_COLUMNS):
                raise DivergenceError(f"non-finite metrics at update {u}")
            rows.append(row)
            append_csv(metrics_path, METRIC_COLUMNS, row)
            every = run.stage.checkpoint_every
            if every and (u + 1) % every == 0 and u + 1 < run.stage.updates:
                self._save(f"_{u + 1:05d}")
        p, v = self._save("")
        return StageResult(self.out, p, v, metrics_path, rows)


class _TeacherTrainer(_Trainer):
    def _update(self, buf) -> dict:
        return ppo_update(buf, self.policy, self.value, self.opt, self.run.ppo, self.rng)


class _StudentTrainer(_Trainer):
    def _update(self, buf) -> dict:
        return dppo_update(buf, self.policy, self.value, self.teacher, self.opt, self.run.ppo, self.run.dppo,
                           self.rng)


def student_perception(run: RunConfig) -> Perception:
    return Perception(run.noise, run.noise.grid, run.stage.map_pipeline)


def train_teacher(run: RunConfig, out_dir) -> StageResult:
    """Stage 1: PPO only with true scan dots and clean proprioception."""
    if run.stage.stage != "teacher":
        raise ConfigError("[stage] stage must be 'teacher' for teacher training")
    tr = _TeacherTrainer(run, out_dir, Perception())
    return tr.train()


def load_policy(run: RunConfig, path) -> PolicyNet:
    net = PolicyNet(run.net, 0, prefix="policy")
    load_checkpoint(net.store, path)
    return net


def teacher_value_path(teacher_ckpt) -> Path | None:
    """The critic saved next to a policy checkpoint, if any."""
    p = Path(teacher_ckpt)
    cand = p.with_name(p.name.replace("policy", "value", 1))
    return cand if cand != p and cand.exists() else None


def train_student(run: RunConfig, teacher_ckpt, out_dir) -> StageResult:
    """Stage 2: student acts on noisy perception, the frozen teacher labels the
    same states from clean observations, and the combined loss is applied."""
    if run.stage.stage != "student":
        raise ConfigError("[stage] stage must be 'student' for student training")
    teacher = load_policy(run, teacher_ckpt)
    teacher_hash = file_sha1(teacher_ckpt)
    tr = _StudentTrainer(run, out_dir, student_perception(run), teacher=teacher)
    if run.stage.init == "teacher":
        transfer_params(teacher, tr.policy)
        vpath = teacher_value_path(teacher_ckpt)
        if run.stage.teacher_value and vpath is not None:
            load_checkpoint(tr.value.store, vpath)
    res = tr.train({"teacher_sha1": teacher_hash, "init": run.stage.init})
    if file_sha1(teacher_ckpt) != teacher_hash:
        raise RuntimeError("teacher checkpoint changed during student training")
    return res


@dataclass
class EvalReport:
    rows: list
    seeds: tuple

    def cell(self, kind: str, noise: float) -> dict:
        for r in self.rows:
            if r["kind"] == kind and r["noise"] == noise:
                return r
        raise KeyError((kind, noise))

    def summary(self) -> str:
        lines = [f"evaluation over seeds {', '.join(str(s) for s in self.seeds)}"]
        for r in self.rows:
            lines.append(f"{r['kind']:>8s} noise={r['noise']:<5g} return={r['mean_return']:9.3f} "
                         f"cmd=({r['cmd_x']:.3f}, {r['cmd_y']:.3f}, {r['cmd_yaw']:.3f}) "
                         f"falls={r['fall_rate']:.3f} trips/ep={r['trip_rate']:.3f} len={r['episode_len']:.1f}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "eval.csv", EVAL_COLUMNS, self.rows)
        (out / "eval_summary.txt").write_text(self.summary(), encoding="utf-8")
        return out / "eval.csv", out / "eval_summary.txt"


def _run_episodes(policy: PolicyNet, run: RunConfig, kind: str, sigma: float, seed: int, traj_dir=None):
    ev = run.eval
    env_cfg = run.env if ev.episode_len == 0 else replace(run.env, episode_len=ev.episode_len)
    run = replace(run, env=env_cfg)
    noise = run.noise if ev.proprio_noise else NoiseSpec()
    perception = Perception(noise, sigma, ev.perception == "map")
    venv = VecEnv(run, ev.episodes, np.random.SeedSequence(seed), perception)
    venv.reset(np.arange(venv.n), (kind,))
    venv.refresh_map()
    n = venv.n
    active = np.ones(n, dtype=bool)
    ret = np.zeros(n)
    length = np.zeros(n, dtype=np.int64)
    fell = np.zeros(n, dtype=bool)
    cmd = np.zeros((n, 3))
    err = np.zeros((n, 3))
    trips = np.zeros(n)
    traj = [[] for _ in range(n)] if traj_dir is not None else None
    while active.any():
        actor, _ = venv.observe()
        mean, _, _ = policy.forward(actor)
        prev = venv.state
        br, info, done, timeout = venv.step(mean)
        a = active
        ret[a] += br.total[a]
        length[a] += 1
        cmd[a] += np.stack([br.raw["command_x"], br.raw["command_y"], br.raw["command_yaw"]], axis=1)[a]
        err[a] += np.abs(info["command"] - info["achieved_vel"])[a]
        trips[a] += info["trips"][a]
        fell |= a & done
        if traj is not None:
            st = venv.state
            for i in np.flatnonzero(a):
                traj[i].append({"step": int(st.step[i]), "phase": st.phase[i], "x": st.base_pos[i, 0],
                                "y": st.base_pos[i, 1], "z": st.base_pos[i, 2], "roll": st.base_rpy[i, 0],
                                "pitch": st.base_rpy[i, 1], "yaw": st.base_rpy[i, 2],
                                "cmd_x": prev.command[i, 0], "cmd_y": prev.command[i, 1],
                                "cmd_yaw": prev.command[i, 2], "v_x": info["achieved_vel"][i, 0],
                                "v_y": info["achieved_vel"][i, 1], "v_yaw": info["achieved_vel"][i, 2],
                                "force_left": info["foot_force"][i, 0], "force_right": info["foot_force"][i, 1],
                                "speed_left": info["foot_speed"][i, 0], "speed_right": info["foot_speed"][i, 1],
                                "trip_count": int(st.trip_count[i]), "done": bool(done[i])})
        active = a & ~(done | timeout)
        venv.refresh_map()
    if traj is not None:
        Path(traj_dir).mkdir(parents=True, exist_ok=True)
        for i, rows in enumerate(traj):
            write_csv(Path(traj_dir) / f"traj_{kind}_{sigma:g}_{seed}_{i:03d}.csv", TRAJ_COLUMNS, rows)
    steps = np.maximum(length, 1)[:, None]
    return ret, cmd / steps, err / steps, trips, fell, length


def evaluate(policy: PolicyNet, run: RunConfig, traj_dir=None) -> EvalReport:
    """Deterministic (mean-action) rollouts for every (terrain kind, noise level)
    cell; the same seeds, and therefore the same commands and terrains, are
    used in every cell."""
    validate_eval(run)
    ev = run.eval
    rows = []
    for kind in ev.kinds:
        for sigma in ev.noise_levels:
            parts = [_run_episodes(policy, run, kind, sigma, s, traj_dir if ev.trajectory_dump else None)
                     for s in ev.seeds]
            ret, cmd, err, trips, fell, length = (np.concatenate([p[i] for p in parts]) for i in range(6))
            rows.append({"kind": kind, "noise": float(sigma), "episodes": len(ret),
                         "mean_return": float(ret.mean()), "cmd_x": float(cmd[:, 0].mean()),
                         "cmd_y": float(cmd[:, 1].mean()), "cmd_yaw": float(cmd[:, 2].mean()),
                         "err_x": float(err[:, 0].mean()), "err_y": float(err[:, 1].mean()),
                         "err_yaw": float(err[:, 2].mean()), "trip_rate": float(trips.mean()),
                         "fall_rate": float(fell.mean()), "episode_len": float(length.mean()),
                         "seeds": ";".join(str(s) for s in ev.seeds)})
    return EvalReport(rows, tuple(ev.seeds))


def validate_eval(run: RunConfig) -> None:
    if run.net.obs_dim != envsim.OBS_DIM:
        raise ConfigError(f"[net] observation size {run.net.obs_dim} does not match the environment "
                          f"({envsim.OBS_DIM})")


def evaluate_checkpoint(ckpt, run: RunConfig, out_dir=None) -> EvalReport:
    policy = load_policy(run, ckpt)
    report = evaluate(policy, run, None if out_dir is None else Path(out_dir) / "trajectories")
    if out_dir is not None:
        report.write(out_dir)
    return report


__all__ = ["CheckpointError", "DPPOConfig", "DivergenceError", "EvalReport", "Perception", "StageResult",
           "VecEnv", "curriculum_weights", "evaluate", "evaluate_checkpoint", "load_policy", "train_student",
           "train_teacher", "validate_run"]
