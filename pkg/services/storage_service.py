"""
On-disk artifacts. Every record is a binary blob plus a JSON sidecar and
every write is atomic (temp file in the same directory, then os.replace).

  dataset     <name>.npy  + <name>.json   (generator, theta, n_data, seed, config_hash, meta)
  checkpoint  <name>.npz  + <name>.json   (version, kind, per-net layer sizes/activations/seeds, ...)
  graph       <name>.npz  + <name>.json
  arrays      <name>.npz  + <name>.json
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from models.graph import Graph
from models.set_dataset import SetDataset
from services.baseline_service import DeepsetModel
from services.common import atomic_path, atomic_write_json
from services.errors import ConfigurationError, NoResultsError
from services.fishnets_service import FishnetsModel
from services.graph_service import GnnLayer, GnnModel
from services.nn_service import DenseNet, validate_net

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 2
AUX_PREFIX = "aux."

PathLike = Union[str, Path]


KNOWN_SUFFIXES = (".npz", ".npy", ".json")


def artifact_stem(path: PathLike) -> Path:
    """Strip a known artifact suffix only; dots elsewhere in the name are kept."""
    path = Path(path)
    return path.with_suffix("") if path.suffix in KNOWN_SUFFIXES else path


def with_ext(stem: Path, ext: str) -> Path:
    return stem.parent / (stem.name + ext)


def _sidecar(stem: Path) -> Path:
    return with_ext(stem, ".json")


def _read_sidecar(stem: Path) -> Dict[str, Any]:
    path = _sidecar(stem)
    if not path.exists():
        raise NoResultsError(f"Missing sidecar {path}")
    return json.loads(path.read_text(encoding="utf-8"))


# --- datasets -----------------------------------------------------------------


def save_dataset(dataset: SetDataset, directory: PathLike, name: str, config_hash: str) -> Path:
    stem = Path(directory) / name
    with atomic_path(with_ext(stem, ".npy")) as tmp:
        np.save(tmp, dataset.data)
    atomic_write_json(
        _sidecar(stem),
        {
            "generator": dataset.meta.get("generator"),
            "theta": dataset.theta,
            "n_data": dataset.n_data,
            "seed": dataset.meta.get("seed"),
            "config_hash": config_hash,
            "meta": dataset.meta,
        },
    )
    return with_ext(stem, ".npy")


def load_dataset(directory: PathLike, name: str) -> SetDataset:
    stem = Path(directory) / name
    header = _read_sidecar(stem)
    data = np.load(with_ext(stem, ".npy"))
    return SetDataset(data=data, theta=np.asarray(header["theta"]), meta=header.get("meta", {}))


def save_dataset_bank(sets: List[SetDataset], directory: PathLike, config_hash: str) -> Path:
    directory = Path(directory)
    for i, dataset in enumerate(sets):
        save_dataset(dataset, directory, f"set_{i:05d}", config_hash)
    logger.info("Wrote %d datasets to %s", len(sets), directory)
    return directory


def load_dataset_bank(directory: PathLike) -> List[SetDataset]:
    directory = Path(directory)
    names = sorted(p.stem for p in directory.glob("set_*.npy"))
    if not names:
        raise NoResultsError(f"No datasets found in {directory}")
    return [load_dataset(directory, name) for name in names]


def bank_config_hash(directory: PathLike) -> Optional[str]:
    """config_hash recorded by the first dataset of a bank."""
    directory = Path(directory)
    first = min((p.stem for p in directory.glob("set_*.npy")), default=None)
    if first is None:
        raise NoResultsError(f"No datasets found in {directory}")
    return _read_sidecar(directory / first).get("config_hash")


# --- checkpoints --------------------------------------------------------------


def _net_header(net: DenseNet) -> Dict[str, Any]:
    return {"layer_sizes": net.layer_sizes, "activations": net.activations, "seed": net.seed}


def _net_from(header: Dict[str, Any], arrays: Dict[str, np.ndarray], prefix: str) -> DenseNet:
    n_layers = len(header["layer_sizes"]) - 1
    net = DenseNet(
        layer_sizes=list(header["layer_sizes"]),
        activations=list(header["activations"]),
        weights=[arrays[f"{prefix}.w{k}"].copy() for k in range(n_layers)],
        biases=[arrays[f"{prefix}.b{k}"].copy() for k in range(n_layers)],
        seed=header.get("seed"),
    )
    validate_net(net)
    return net


def _describe(model) -> Tuple[str, Dict[str, Any], Dict[str, np.ndarray]]:
    """Kind, header fields and auxiliary (non-trainable) arrays of a model."""
    if isinstance(model, FishnetsModel):
        header = {
            "nets": {"score": _net_header(model.score_net), "fisher": _net_header(model.fisher_net)},
            "n_p": model.n_p,
            "c": model.c,
        }
        aux = {
            "input_shift": model.input_shift,
            "input_scale": model.input_scale,
            "score_scale": model.score_scale,
            "prior_score": model.prior_score,
            "prior_fisher": model.prior_fisher,
        }
        return "fishnets", header, aux
    if isinstance(model, DeepsetModel):
        header = {
            "nets": {"embed": _net_header(model.embed_net), "global": _net_header(model.global_net)},
            "aggregation": model.aggregation,
        }
        aux = {
            "input_shift": model.input_shift,
            "input_scale": model.input_scale,
            "theta_shift": model.theta_shift,
            "theta_scale": model.theta_scale,
            "beta": model.beta,
        }
        return model.kind, header, aux
    if isinstance(model, GnnModel):
        nets = {"encoder": _net_header(model.encoder), "readout": _net_header(model.readout)}
        layers = []
        for k, layer in enumerate(model.layers):
            nets[f"layer{k}.message"] = _net_header(layer.message_net)
            nets[f"layer{k}.update"] = _net_header(layer.update_net)
            if layer.pre_map is not None:
                nets[f"layer{k}.premap"] = _net_header(layer.pre_map)
            layers.append({"aggregation": layer.aggregation, "residual": layer.residual, "n_p": layer.n_p})
        header = {"nets": nets, "layers": layers, "aggregation": model.aggregation}
        return "gnn", header, {"node_shift": model.node_shift, "node_scale": model.node_scale}
    raise ConfigurationError(f"Cannot checkpoint objects of type {type(model).__name__}")


def save_checkpoint(model, path: PathLike, config_hash: str, extra: Optional[Dict[str, Any]] = None) -> Path:
    stem = artifact_stem(path)
    kind, header, aux = _describe(model)
    arrays = dict(model.parameters())
    arrays.update({AUX_PREFIX + k: v for k, v in aux.items()})
    with atomic_path(with_ext(stem, ".npz")) as tmp:
        np.savez(tmp, **arrays)
    header.update(
        {
            "version": CHECKPOINT_VERSION,
            "kind": kind,
            "n_params": model.n_params,
            "config_hash": config_hash,
            "extra": extra or {},
        }
    )
    atomic_write_json(_sidecar(stem), header)
    logger.info("Saved %s checkpoint (%d parameters) to %s", kind, model.n_params, stem)
    return with_ext(stem, ".npz")


def read_checkpoint_header(path: PathLike) -> Dict[str, Any]:
    return _read_sidecar(artifact_stem(path))


def load_checkpoint(path: PathLike):
    stem = artifact_stem(path)
    header = _read_sidecar(stem)
    if header.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"Unsupported checkpoint version {header.get('version')}")
    with np.load(with_ext(stem, ".npz")) as blob:
        arrays = {k: blob[k] for k in blob.files}
    nets = header["nets"]
    aux = {k[len(AUX_PREFIX):]: v for k, v in arrays.items() if k.startswith(AUX_PREFIX)}
    kind = header["kind"]

    if kind == "fishnets":
        return FishnetsModel(
            score_net=_net_from(nets["score"], arrays, "score"),
            fisher_net=_net_from(nets["fisher"], arrays, "fisher"),
            n_p=int(header["n_p"]),
            c=np.asarray(header["c"]),
            input_shift=aux["input_shift"],
            input_scale=aux["input_scale"],
            score_scale=aux["score_scale"],
            prior_score=aux["prior_score"],
            prior_fisher=aux["prior_fisher"],
        )
    if kind in ("deepset", "softmax"):
        return DeepsetModel(
            embed_net=_net_from(nets["embed"], arrays, "embed"),
            global_net=_net_from(nets["global"], arrays, "global"),
            aggregation=header["aggregation"],
            beta=aux["beta"].copy(),
            theta_shift=aux["theta_shift"],
            theta_scale=aux["theta_scale"],
            input_shift=aux["input_shift"],
            input_scale=aux["input_scale"],
        )
    if kind == "gnn":
        layers = []
        for k, spec in enumerate(header["layers"]):
            prefix = f"layer{k}."
            layers.append(
                GnnLayer(
                    message_net=_net_from(nets[prefix + "message"], arrays, prefix + "message"),
                    update_net=_net_from(nets[prefix + "update"], arrays, prefix + "update"),
                    aggregation=spec["aggregation"],
                    residual=spec["residual"],
                    pre_map=_net_from(nets[prefix + "premap"], arrays, prefix + "premap")
                    if prefix + "premap" in nets else None,
                    n_p=spec["n_p"],
                    beta=arrays.get(prefix + "beta", np.ones(1)).copy(),
                )
            )
        return GnnModel(
            encoder=_net_from(nets["encoder"], arrays, "encoder"),
            layers=layers,
            readout=_net_from(nets["readout"], arrays, "readout"),
            node_shift=aux["node_shift"],
            node_scale=aux["node_scale"],
            aggregation=header["aggregation"],
        )
    raise ConfigurationError(f"Unknown checkpoint kind '{kind}'")


def checkpoint_param_count(path: PathLike) -> int:
    """Recount trainable parameters straight from the checkpoint blob."""
    with np.load(with_ext(artifact_stem(path), ".npz")) as blob:
        return int(sum(blob[k].size for k in blob.files if not k.startswith(AUX_PREFIX)))


# --- graphs and raw arrays ----------------------------------------------------------


def save_graph(graph: Graph, path: PathLike, config_hash: str) -> Path:
    stem = artifact_stem(path)
    arrays = {
        "node_features": graph.node_features,
        "edge_index": graph.edge_index,
        "edge_features": graph.edge_features,
        "labels": graph.labels,
    }
    if graph.edge_truth is not None:
        arrays["edge_truth"] = graph.edge_truth
    arrays.update({f"mask_{k}": v for k, v in graph.masks.items()})
    with atomic_path(with_ext(stem, ".npz")) as tmp:
        np.savez(tmp, **arrays)
    atomic_write_json(
        _sidecar(stem),
        {
            "n_nodes": graph.n_nodes,
            "n_edges": graph.n_edges,
            "n_tasks": graph.n_tasks,
            "masks": sorted(graph.masks),
            "seed": graph.meta.get("seed"),
            "config_hash": config_hash,
            "meta": graph.meta,
        },
    )
    return with_ext(stem, ".npz")


def load_graph(path: PathLike) -> Graph:
    stem = artifact_stem(path)
    header = _read_sidecar(stem)
    with np.load(with_ext(stem, ".npz")) as blob:
        return Graph(
            node_features=blob["node_features"],
            edge_index=blob["edge_index"],
            edge_features=blob["edge_features"],
            labels=blob["labels"],
            masks={k: blob[f"mask_{k}"] for k in header["masks"]},
            meta=header.get("meta", {}),
            edge_truth=blob["edge_truth"] if "edge_truth" in blob.files else None,
        )


def save_arrays(path: PathLike, arrays: Dict[str, np.ndarray], meta: Dict[str, Any], config_hash: str) -> Path:
    stem = artifact_stem(path)
    with atomic_path(with_ext(stem, ".npz")) as tmp:
        np.savez(tmp, **arrays)
    atomic_write_json(
        _sidecar(stem),
        {"arrays": {k: list(np.shape(v)) for k, v in arrays.items()}, "config_hash": config_hash, "meta": meta},
    )
    return with_ext(stem, ".npz")


def load_arrays(path: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    stem = artifact_stem(path)
    header = _read_sidecar(stem)
    with np.load(with_ext(stem, ".npz")) as blob:
        return {k: blob[k] for k in blob.files}, header
