"""INI config file covering every tunable in the artifact.

Sections: [dataset], [anonymize], [npe], [poe], [pretrain], [pipeline],
[experiment].  Missing keys take the defaults below, so a config file
only needs the values it overrides.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field

from edgelbs.anonymize import CloakRegion
from edgelbs.dataset import SynthSpec
from edgelbs.npe import NpeHyper
from edgelbs.poe import PoeHyper
from edgelbs.pretrain import WalkConfig

__all__ = [
    "AnonymizeConfig",
    "PipelineSection",
    "ExperimentConfig",
    "FullConfig",
    "load_config",
    "config_sha256",
    "DEFAULT_CONFIG",
]


@dataclass
class AnonymizeConfig:
    k: int = 5
    center_lat: float = 0.0
    center_lon: float = 0.0
    half_lat: float = 0.2
    half_lon: float = 0.2
    perturb_fraction: float = 0.1
    attr_vocab: tuple = ("food", "fuel", "shop", "parking")

    @property
    def region(self):
        return CloakRegion(
            center=(self.center_lat, self.center_lon),
            half_extent=(self.half_lat, self.half_lon),
        )


@dataclass
class PipelineSection:
    edge_latency_ms: float = 10.0
    cloud_latency_ms: float = 100.0
    degrade_prob: float = 0.5
    top_k: int = 5
    target_acceptance: float = 0.7
    n_requests: int = 20
    edge_fraction: float = 0.6   # fraction of POIs indexed on the edge


@dataclass
class ExperimentConfig:
    sweeps: tuple = ("rho",)
    rho_grid: tuple = ("-", 0.0, 0.3, 0.5, 0.7, 1.0)
    alpha_grid: tuple = (0.1, 0.3, 0.6, 1.0)
    beta_grid: tuple = (0.1, 0.2, 0.6, 1.0)
    dim_grid: tuple = (5, 10, 20)


@dataclass
class DatasetConfig:
    synth: SynthSpec = field(default_factory=SynthSpec)
    min_user: int = 0    # sparsity filtering is opt-in
    min_poi: int = 0
    ratios: tuple = (0.7, 0.2, 0.1)


@dataclass
class FullConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    anonymize: AnonymizeConfig = field(default_factory=AnonymizeConfig)
    npe: NpeHyper = field(default_factory=NpeHyper)
    poe: PoeHyper = field(default_factory=PoeHyper)
    pretrain: WalkConfig = field(default_factory=WalkConfig)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)


def _get(parser, section, key, cast, default):
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key)
    if cast is bool:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    return cast(raw)


def _tuple(cast):
    return lambda raw: tuple(cast(x.strip()) for x in raw.split(",") if x.strip())


def _rho_token(x):
    return "-" if x == "-" else float(x)


def load_config(path=None, text=None):
    """Parse an INI config layered over DEFAULT_CONFIG; unknown keys are
    rejected to catch typos."""
    if path is not None and text is None:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    user = configparser.ConfigParser()
    if text is not None:
        user.read_string(text)

    known = {
        "dataset": {"n_users", "n_pois", "n_clusters", "seq_len",
                    "within_cluster_prob", "min_user", "min_poi", "ratios"},
        "anonymize": {"k", "center_lat", "center_lon", "half_lat", "half_lon",
                      "perturb_fraction", "attr_vocab"},
        "npe": {"dim", "sparsity_lambda", "dropout", "tau_s", "thre1", "reg_weight",
                "lr", "momentum", "epochs", "neg_ratio", "neg_strategy", "batch_size"},
        "poe": {"dim", "alpha", "beta", "interval_pi", "buckets", "thre2", "n_neg",
                "lr", "momentum", "epochs", "use_meta", "use_time"},
        "pretrain": {"rho", "walk_length", "walks_per_node", "window", "negatives",
                     "epochs", "lr", "geo_truncate"},
        "pipeline": {"edge_latency_ms", "cloud_latency_ms", "degrade_prob", "top_k",
                     "target_acceptance", "n_requests", "edge_fraction"},
        "experiment": {"sweeps", "rho_grid", "alpha_grid", "beta_grid", "dim_grid"},
    }
    for section in user.sections():
        if section not in known:
            raise ValueError(f"unknown config section [{section}]")
        extra = set(user.options(section)) - known[section]
        if extra:
            raise ValueError(f"unknown keys in [{section}]: {sorted(extra)}")

    parser = configparser.ConfigParser()
    parser.read_string(DEFAULT_CONFIG)
    if text is not None:
        parser.read_string(text)

    cfg = FullConfig()
    ds, s = cfg.dataset, "dataset"
    ds.synth.n_users = _get(parser, s, "n_users", int, ds.synth.n_users)
    ds.synth.n_pois = _get(parser, s, "n_pois", int, ds.synth.n_pois)
    ds.synth.n_clusters = _get(parser, s, "n_clusters", int, ds.synth.n_clusters)
    ds.synth.seq_len = _get(parser, s, "seq_len", int, ds.synth.seq_len)
    ds.synth.within_cluster_prob = _get(
        parser, s, "within_cluster_prob", float, ds.synth.within_cluster_prob
    )
    ds.min_user = _get(parser, s, "min_user", int, ds.min_user)
    ds.min_poi = _get(parser, s, "min_poi", int, ds.min_poi)
    ds.ratios = _get(parser, s, "ratios", _tuple(float), ds.ratios)

    an, s = cfg.anonymize, "anonymize"
    an.k = _get(parser, s, "k", int, an.k)
    an.center_lat = _get(parser, s, "center_lat", float, an.center_lat)
    an.center_lon = _get(parser, s, "center_lon", float, an.center_lon)
    an.half_lat = _get(parser, s, "half_lat", float, an.half_lat)
    an.half_lon = _get(parser, s, "half_lon", float, an.half_lon)
    an.perturb_fraction = _get(parser, s, "perturb_fraction", float, an.perturb_fraction)
    an.attr_vocab = _get(parser, s, "attr_vocab", _tuple(str), an.attr_vocab)

    np_, s = cfg.npe, "npe"
    np_.dim = _get(parser, s, "dim", int, np_.dim)
    np_.sparsity_lambda = _get(parser, s, "sparsity_lambda", int, np_.sparsity_lambda)
    np_.dropout = _get(parser, s, "dropout", float, np_.dropout)
    np_.tau_s = _get(parser, s, "tau_s", float, np_.tau_s)
    np_.thre1 = _get(parser, s, "thre1", float, np_.thre1)
    np_.reg_weight = _get(parser, s, "reg_weight", float, np_.reg_weight)
    np_.lr = _get(parser, s, "lr", float, np_.lr)
    np_.momentum = _get(parser, s, "momentum", float, np_.momentum)
    np_.epochs = _get(parser, s, "epochs", int, np_.epochs)
    np_.neg_ratio = _get(parser, s, "neg_ratio", int, np_.neg_ratio)
    np_.neg_strategy = _get(parser, s, "neg_strategy", str, np_.neg_strategy)
    np_.batch_size = _get(parser, s, "batch_size", int, np_.batch_size)

    po, s = cfg.poe, "poe"
    po.dim = _get(parser, s, "dim", int, po.dim)
    po.alpha = _get(parser, s, "alpha", float, po.alpha)
    po.beta = _get(parser, s, "beta", float, po.beta)
    po.interval_pi = _get(parser, s, "interval_pi", float, po.interval_pi)
    po.buckets = _get(parser, s, "buckets", int, po.buckets)
    po.thre2 = _get(parser, s, "thre2", float, po.thre2)
    po.n_neg = _get(parser, s, "n_neg", int, po.n_neg)
    po.lr = _get(parser, s, "lr", float, po.lr)
    po.momentum = _get(parser, s, "momentum", float, po.momentum)
    po.epochs = _get(parser, s, "epochs", int, po.epochs)
    po.use_meta = _get(parser, s, "use_meta", bool, po.use_meta)
    po.use_time = _get(parser, s, "use_time", bool, po.use_time)

    pt, s = cfg.pretrain, "pretrain"
    pt.rho = _get(parser, s, "rho", float, pt.rho)
    pt.walk_length = _get(parser, s, "walk_length", int, pt.walk_length)
    pt.walks_per_node = _get(parser, s, "walks_per_node", int, pt.walks_per_node)
    pt.window = _get(parser, s, "window", int, pt.window)
    pt.negatives = _get(parser, s, "negatives", int, pt.negatives)
    pt.epochs = _get(parser, s, "epochs", int, pt.epochs)
    pt.lr = _get(parser, s, "lr", float, pt.lr)
    pt.geo_truncate = _get(parser, s, "geo_truncate", int, pt.geo_truncate)

    pl, s = cfg.pipeline, "pipeline"
    pl.edge_latency_ms = _get(parser, s, "edge_latency_ms", float, pl.edge_latency_ms)
    pl.cloud_latency_ms = _get(parser, s, "cloud_latency_ms", float, pl.cloud_latency_ms)
    pl.degrade_prob = _get(parser, s, "degrade_prob", float, pl.degrade_prob)
    pl.top_k = _get(parser, s, "top_k", int, pl.top_k)
    pl.target_acceptance = _get(parser, s, "target_acceptance", float, pl.target_acceptance)
    pl.n_requests = _get(parser, s, "n_requests", int, pl.n_requests)
    pl.edge_fraction = _get(parser, s, "edge_fraction", float, pl.edge_fraction)

    ex, s = cfg.experiment, "experiment"
    ex.sweeps = _get(parser, s, "sweeps", _tuple(str), ex.sweeps)
    ex.rho_grid = _get(parser, s, "rho_grid", _tuple(_rho_token), ex.rho_grid)
    ex.alpha_grid = _get(parser, s, "alpha_grid", _tuple(float), ex.alpha_grid)
    ex.beta_grid = _get(parser, s, "beta_grid", _tuple(float), ex.beta_grid)
    ex.dim_grid = _get(parser, s, "dim_grid", _tuple(int), ex.dim_grid)
    return cfg


def config_sha256(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


DEFAULT_CONFIG = """\
[dataset]
n_users = 12
n_pois = 24
n_clusters = 6
seq_len = 30
within_cluster_prob = 0.9
min_user = 0
min_poi = 0
ratios = 0.7, 0.2, 0.1

[anonymize]
k = 5
center_lat = 0.0
center_lon = 0.0
half_lat = 0.2
half_lon = 0.2
perturb_fraction = 0.1
attr_vocab = food, fuel, shop, parking

[npe]
dim = 8
sparsity_lambda = 2
dropout = 0.0
tau_s = 1.0
thre1 = 0.0
reg_weight = 0.0
lr = 0.05
momentum = 0.9
epochs = 20
neg_ratio = 4
neg_strategy = nearby
batch_size = 16

[poe]
dim = 8
alpha = 0.3
beta = 0.2
interval_pi = 86400
buckets = 24
thre2 = 0.5
n_neg = 5
lr = 0.02
momentum = 0.5
epochs = 6
use_meta = false
use_time = false

[pretrain]
rho = 0.0
walk_length = 20
walks_per_node = 10
window = 3
negatives = 5
epochs = 3
lr = 0.025
geo_truncate = 200

[pipeline]
edge_latency_ms = 10
cloud_latency_ms = 100
degrade_prob = 0.5
top_k = 5
target_acceptance = 0.7
n_requests = 20
edge_fraction = 0.6

[experiment]
sweeps = rho
rho_grid = -, 0, 0.3, 0.5, 0.7, 1
alpha_grid = 0.1, 0.3, 0.6, 1.0
beta_grid = 0.1, 0.2, 0.6, 1.0
dim_grid = 5, 10, 20
"""
