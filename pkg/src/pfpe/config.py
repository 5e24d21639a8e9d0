"""Experiment configuration: JSON in, dataclasses out, and back.

Shape::

    {
      "environment": {"kind": "baird" | "cycle2" | "selfloop" | "random_ergodic" | "inline", ...},
      "approximator": {"kind": "linear", "features": "one_hot" | "baird" | [[...]], "init": [...]}
                    | {"kind": "mlp", "hidden_width": 8, "init_scale": 0.5},
      "run": {"schedule": {...}, "k": 1, "n_target_updates": 1, "target_rule": {...}, ...},
      "sweep": {"k": [...], "alpha": [...], "total_steps": null},
      "seeds": [0, 1, 2],
      "analysis": {"center": null, "radius": 1.0, "samples": 128, "k_max": 100, "synthetic": null}
    }
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .approximator import FeatureMap, LinearApproximator, MlpApproximator, MlpSpec
from .errors import ConfigError
from .mdp import (BAIRD_INIT, FiniteMdp, Policy, StateDistribution, build_baird, cycle2_mdp, random_ergodic_mdp,
                  selfloop_mdp, stationary_distribution)
from .td_engine import Regularisation, RunConfig, StepSizeSchedule, TargetUpdateRule

MLP_DEFAULT_CLIP = 1e3
ENV_KINDS = ("baird", "cycle2", "selfloop", "random_ergodic", "inline")


@dataclass(frozen=True)
class EnvironmentConfig:
    kind: str = "baird"
    gamma: float | None = None
    n_states: int = 5
    n_actions: int = 2
    seed: int = 0
    r_max: float = 1.0
    inline: dict | None = None

    def __post_init__(self):
        if self.kind not in ENV_KINDS:
            raise ConfigError(f"unknown environment kind {self.kind!r}")
        if self.kind == "inline" and not isinstance(self.inline, dict):
            raise ConfigError("inline environments need an 'mdp', 'd', 'mu', 'pi' object")

    def to_json(self) -> dict:
        out = {"kind": self.kind}
        if self.gamma is not None:
            out["gamma"] = self.gamma
        if self.kind == "random_ergodic":
            out.update(n_states=self.n_states, n_actions=self.n_actions, seed=self.seed, r_max=self.r_max)
        if self.kind == "inline":
            out.update(self.inline)
        return out

    @classmethod
    def from_json(cls, doc: dict) -> "EnvironmentConfig":
        doc = dict(doc)
        kind = doc.pop("kind", "baird")
        gamma = doc.pop("gamma", None)
        if kind == "random_ergodic":
            return cls(kind, gamma, int(doc.get("n_states", 5)), int(doc.get("n_actions", 2)),
                       int(doc.get("seed", 0)), float(doc.get("r_max", 1.0)))
        if kind == "inline":
            return cls(kind, gamma, inline=doc)
        return cls(kind, gamma)


@dataclass(frozen=True)
class ApproximatorConfig:
    kind: str = "linear"
    features: object = "default"  # "default" | "one_hot" | explicit table (tuple of tuples)
    init: tuple | None = None
    hidden_width: int = 8
    init_scale: float = 0.5

    def __post_init__(self):
        if self.kind not in ("linear", "mlp"):
            raise ConfigError(f"unknown approximator kind {self.kind!r}")

    def to_json(self) -> dict:
        if self.kind == "mlp":
            out = {"kind": "mlp", "hidden_width": self.hidden_width, "init_scale": self.init_scale}
        else:
            feats = self.features if isinstance(self.features, str) else [list(r) for r in self.features]
            out = {"kind": "linear", "features": feats}
        if self.init is not None:
            out["init"] = list(self.init)
        return out

    @classmethod
    def from_json(cls, doc: dict) -> "ApproximatorConfig":
        kind = doc.get("kind", "linear")
        init = doc.get("init")
        init = tuple(float(x) for x in init) if init is not None else None
        if kind == "mlp":
            return cls("mlp", init=init, hidden_width=int(doc.get("hidden_width", 8)),
                       init_scale=float(doc.get("init_scale", 0.5)))
        feats = doc.get("features", "default")
        if not isinstance(feats, str):
            feats = tuple(tuple(float(x) for x in row) for row in feats)
        return cls(kind, feats, init)


def run_config_to_json(rc: RunConfig) -> dict:
    sch = rc.schedule
    schedule = ({"kind": "constant", "alpha": sch.alpha} if sch.kind == "constant"
                else {"kind": "robbins_monro", "alpha0": sch.alpha, "power": sch.power})
    rule = ({"kind": "periodic"} if rc.target_rule.kind == "periodic"
            else {"kind": "momentum", "mu": rc.target_rule.momentum})
    reg = rc.regularisation
    out = {
        "schedule": schedule, "k": rc.k, "n_target_updates": rc.n_target_updates, "target_rule": rule,
        "regularisation": {"enabled": reg.enabled, "mix": reg.mix, "eta": reg.eta},
        "mode": rc.mode, "clip": None if math.isinf(rc.clip) else rc.clip,
        "importance_weighting": rc.importance_weighting, "divergence_threshold": rc.divergence_threshold,
    }
    if rc.gamma is not None:
        out["gamma"] = rc.gamma
    return out


def run_config_from_json(doc: dict) -> RunConfig:
    try:
        s = doc.get("schedule", {"kind": "constant", "alpha": 0.01})
        if s.get("kind", "constant") == "constant":
            schedule = StepSizeSchedule.constant(float(s["alpha"]))
        elif s["kind"] == "robbins_monro":
            schedule = StepSizeSchedule.robbins_monro(float(s["alpha0"]), float(s["power"]))
        else:
            raise ConfigError(f"unknown schedule kind {s['kind']!r}")
        t = doc.get("target_rule", {"kind": "periodic"})
        if t.get("kind", "periodic") == "periodic":
            rule = TargetUpdateRule.periodic()
        elif t["kind"] == "momentum":
            rule = TargetUpdateRule.with_momentum(float(t["mu"]))
        else:
            raise ConfigError(f"unknown target rule {t['kind']!r}")
        r = doc.get("regularisation", {})
        reg = Regularisation(bool(r.get("enabled", False)), float(r.get("mix", 1.0)), float(r.get("eta", 0.0)))
        clip = doc.get("clip")
        gamma = doc.get("gamma")
        return RunConfig(schedule, int(doc.get("k", 1)), int(doc.get("n_target_updates", 1)), rule, reg,
                         doc.get("mode", "sampled"), 0, math.inf if clip is None else float(clip),
                         None if gamma is None else float(gamma), bool(doc.get("importance_weighting", False)),
                         float(doc.get("divergence_threshold", 1e8)))
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad run section: {exc}") from exc


@dataclass(frozen=True)
class SweepConfig:
    k: tuple = ()
    alpha: tuple = ()
    total_steps: int | None = None

    def __post_init__(self):
        if not self.k or not self.alpha:
            raise ConfigError("sweep lists over k and alpha must be non-empty")

    def to_json(self) -> dict:
        out = {"k": list(self.k), "alpha": list(self.alpha)}
        if self.total_steps is not None:
            out["total_steps"] = self.total_steps
        return out

    @classmethod
    def from_json(cls, doc: dict) -> "SweepConfig":
        ts = doc.get("total_steps")
        return cls(tuple(int(x) for x in doc.get("k", ())), tuple(float(x) for x in doc.get("alpha", ())),
                   None if ts is None else int(ts))


@dataclass(frozen=True)
class AnalysisConfig:
    center: tuple | None = None
    radius: float = 1.0
    samples: int = 128
    k_max: int = 100
    sigma_delta: float | None = None
    synthetic: dict | None = None  # {"j_fpe_norm", "j_td_norm", "lambda"}

    def to_json(self) -> dict:
        out = {"center": None if self.center is None else list(self.center), "radius": self.radius,
               "samples": self.samples, "k_max": self.k_max}
        if self.sigma_delta is not None:
            out["sigma_delta"] = self.sigma_delta
        if self.synthetic is not None:
            out["synthetic"] = dict(self.synthetic)
        return out

    @classmethod
    def from_json(cls, doc: dict) -> "AnalysisConfig":
        c = doc.get("center")
        sd = doc.get("sigma_delta")
        return cls(None if c is None else tuple(float(x) for x in c), float(doc.get("radius", 1.0)),
                   int(doc.get("samples", 128)), int(doc.get("k_max", 100)),
                   None if sd is None else float(sd), doc.get("synthetic"))


@dataclass(frozen=True)
class ExperimentConfig:
    environment: EnvironmentConfig = field(default_factory=EnvironmentConfig)
    approximator: ApproximatorConfig = field(default_factory=ApproximatorConfig)
    run: RunConfig = field(default_factory=RunConfig)
    seeds: tuple = (0,)
    sweep: SweepConfig | None = None
    analysis: AnalysisConfig | None = None

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")

    def to_json(self) -> dict:
        out = {"environment": self.environment.to_json(), "approximator": self.approximator.to_json(),
               "run": run_config_to_json(self.run), "seeds": list(self.seeds)}
        if self.sweep is not None:
            out["sweep"] = self.sweep.to_json()
        if self.analysis is not None:
            out["analysis"] = self.analysis.to_json()
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, doc) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - {"environment", "approximator", "run", "seeds", "sweep", "analysis"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            approx = ApproximatorConfig.from_json(doc.get("approximator", {}))
            run_doc = dict(doc.get("run", {}))
            if approx.kind == "mlp" and run_doc.get("clip") is None:
                run_doc["clip"] = MLP_DEFAULT_CLIP
            return cls(EnvironmentConfig.from_json(doc.get("environment", {})),
                       approx,
                       run_config_from_json(run_doc),
                       tuple(int(s) for s in doc.get("seeds", [0])),
                       SweepConfig.from_json(doc["sweep"]) if doc.get("sweep") is not None else None,
                       AnalysisConfig.from_json(doc["analysis"]) if doc.get("analysis") is not None else None)
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        return cls.from_json(doc)

    def with_seeds(self, seeds) -> "ExperimentConfig":
        return replace(self, seeds=tuple(seeds))


@dataclass
class Problem:
    mdp: FiniteMdp
    approx: object
    d: StateDistribution
    mu: Policy
    pi: Policy
    omega0: np.ndarray
    importance_weighting: bool = False


def build_problem(cfg: ExperimentConfig, seed: int = 0) -> Problem:
    """Materialise the environment and approximator; ``seed`` only affects MLP initialisation."""
    env = cfg.environment
    features = None
    init = None
    iw = cfg.run.importance_weighting
    try:
        if env.kind == "baird":
            mdp, features, pi, mu, d = build_baird(0.99 if env.gamma is None else env.gamma)
            init = np.array(BAIRD_INIT)
        else:
            if env.kind == "cycle2":
                mdp = cycle2_mdp(gamma=0.9 if env.gamma is None else env.gamma)
            elif env.kind == "selfloop":
                mdp = selfloop_mdp(gamma=0.9 if env.gamma is None else env.gamma)
            elif env.kind == "random_ergodic":
                mdp = random_ergodic_mdp(np.random.default_rng(env.seed), env.n_states, env.n_actions, env.r_max,
                                         0.9 if env.gamma is None else env.gamma)
            else:
                doc = env.inline
                mdp = FiniteMdp.from_json(doc["mdp"])
                if env.gamma is not None:
                    mdp = mdp.with_gamma(env.gamma)
            if env.kind == "inline":
                pi = Policy(np.asarray(doc["pi"], dtype=float))
                mu = Policy(np.asarray(doc.get("mu", doc["pi"]), dtype=float))
                d = (StateDistribution(np.asarray(doc["d"], dtype=float)) if "d" in doc
                     else stationary_distribution(mdp, pi))
            else:
                pi = mu = Policy.uniform(mdp.n_states, mdp.n_actions)
                d = stationary_distribution(mdp, pi)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad environment section: {exc}") from exc

    ac = cfg.approximator
    if ac.kind == "mlp":
        approx = MlpApproximator(MlpSpec(ac.hidden_width, "tanh", ac.init_scale), mdp.n_states, mdp.n_actions)
        omega0 = approx.init_params(np.random.default_rng(seed)) if ac.init is None else np.array(ac.init)
    else:
        if isinstance(ac.features, str):
            if ac.features == "one_hot" or (ac.features == "default" and features is None):
                features = FeatureMap.one_hot(mdp.n_states, mdp.n_actions)
            elif ac.features not in ("default", "baird"):
                raise ConfigError(f"unknown feature preset {ac.features!r}")
            elif features is None:
                raise ConfigError("the 'baird' feature preset needs the baird environment")
        else:
            features = FeatureMap(np.asarray(ac.features, dtype=float), mdp.n_states, mdp.n_actions)
        approx = LinearApproximator(features)
        if ac.init is not None:
            omega0 = np.array(ac.init, dtype=float)
        elif init is not None and features.dim == init.shape[0]:
            omega0 = init
        else:
            omega0 = np.zeros(features.dim)
    if omega0.shape[0] != approx.param_dim:
        raise ConfigError(f"init has {omega0.shape[0]} entries, approximator needs {approx.param_dim}")
    return Problem(mdp, approx, d, mu, pi, omega0, iw)
