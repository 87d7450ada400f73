"""Turn retained chain snapshots into completed datasets."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from . import __version__
from .data import Ecdf, MixedDataset, empirical_quantile, write_dataset
from .gibbs import ChainConfig, ChainResult, Priors, Snapshot, run_chains
from .probit import build_blocks, decode_categories

_TINY = np.nextafter(0.0, 1.0)
_ALMOST_ONE = np.nextafter(1.0, 0.0)


@dataclass
class ImputedSet:
    datasets: list[MixedDataset]
    source: MixedDataset
    seed: int
    config_hash: str
    chains: list[ChainResult] = field(default_factory=list, repr=False)

    @property
    def M(self) -> int:
        return len(self.datasets)

    def arrays(self) -> list[np.ndarray]:
        return [d.values for d in self.datasets]


def impute_from_state(snapshot: Snapshot, dataset: MixedDataset, ecdfs: dict[int, Ecdf] | None = None) -> MixedDataset:
    """Fill every missing cell from one snapshot's latents.

    Ordered cells get ``F^-1(Phi(z))`` under the column's observed empirical
    distribution; nominal cells get the category decoded from their
    utilities.  Observed cells are copied unchanged.
    """
    ecdfs = dataset.ecdfs() if ecdfs is None else ecdfs
    values = dataset.values.copy()
    state = snapshot.state
    for k, j in enumerate(dataset.ordered_idx):
        miss = ~dataset.mask[:, j]
        if miss.any():
            u = np.clip(ndtr(state.Z[miss, k]), _TINY, _ALMOST_ONE)
            values[miss, j] = empirical_quantile(ecdfs[int(j)], u)
    nominal = dataset.nominal_idx
    blocks = build_blocks([dataset.columns[j].name for j in nominal], [dataset.columns[j].levels for j in nominal])
    for block, j in zip(blocks, nominal):
        miss = ~dataset.mask[:, j]
        if miss.any():
            values[miss, j] = decode_categories(state.W[miss][:, block.latent_slice])
    return dataset.with_values(values, np.ones_like(dataset.mask))


def config_hash(config: ChainConfig, priors: Priors | None) -> str:
    payload = {"config": asdict(config)}
    if priors is not None:
        payload["priors"] = priors_json(priors)
    text = json.dumps(payload, sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def priors_json(priors: Priors) -> dict:
    return {
        "nu_psi": float(priors.nu_psi),
        "lambda_psi": np.asarray(priors.lambda_psi).tolist(),
        "nu_gamma": float(priors.nu_gamma),
        "lambda_gamma": np.asarray(priors.lambda_gamma).tolist(),
    }


def multiple_impute(dataset: MixedDataset, priors: Priors | None = None, config: ChainConfig | None = None,
                    out_dir=None, n_chains: int = 1, jobs: int = 1) -> ImputedSet:
    """Run the sampler and complete one dataset per retained snapshot.

    With ``out_dir``, writes ``imp_001.csv`` ... and a ``manifest.json``.
    """
    config = config or ChainConfig()
    chains = run_chains(dataset, priors, config, n_chains=n_chains, jobs=jobs)
    ecdfs = dataset.ecdfs()
    completed = [impute_from_state(s, dataset, ecdfs) for res in chains for s in res.snapshots]
    imputed = ImputedSet(completed, dataset, config.seed, config_hash(config, priors), chains)
    if out_dir is not None:
        write_imputations(imputed, out_dir, config, priors)
    return imputed


def imputation_filename(k: int) -> str:
    return f"imp_{k:03d}.csv"


def write_imputations(imputed: ImputedSet, out_dir, config: ChainConfig, priors: Priors | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, ds in enumerate(imputed.datasets, start=1):
        path = out / imputation_filename(k)
        write_dataset(ds, path, source=imputed.source)
        paths.append(path)
    src = imputed.source
    stats = [asdict(c.stats) | {"chain": c.chain} for c in imputed.chains]
    for s in stats:
        s.pop("seconds", None)
    manifest = {
        "artifact_version": __version__,
        "seed": config.seed,
        "config": asdict(config),
        "config_hash": imputed.config_hash,
        "priors": priors_json(priors) if priors is not None else "default",
        "schema": src.schema.to_json(),
        "n_rows": src.n_rows,
        "missing_counts": {n: int(c) for n, c in zip(src.names, (~src.mask).sum(axis=0))},
        "imputations": [p.name for p in paths],
        "snapshot_iterations": [[s.iteration for s in c.snapshots] for c in imputed.chains],
        "chain_stats": stats,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths
