"""The MACE unit: map generator, embedding generator, relevance estimator and output generator.

Parameters are stored per class so that pruning can leave classes with
different concept counts. Concepts keep their original index in
``concept_ids`` for reporting after pruning.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .checkpoint import load_archive, save_archive
from .embedding import embed, make_embedding_net
from .maps import generate_concept_maps, init_map_weights
from .output import reconstruct_dense
from .relevance import compute_relevances

DTYPE = torch.float64


@dataclass
class MaceOutput:
    maps: list  # per class: N x C_k x H x W
    embeddings: list  # per class: N x C_k x Q
    relevances: list  # per class: N x C_k
    z_hat: torch.Tensor  # N x L


class MaceModel(nn.Module):
    def __init__(self, num_classes, tap_height, tap_width, tap_depth, dense_dim,
                 num_concepts=10, embed_dim=32, hidden=(256, 64), seed=0, class_names=None,
                 map_init="gaussian"):
        super().__init__()
        counts = [num_concepts] * num_classes if isinstance(num_concepts, int) else list(num_concepts)
        if len(counts) != num_classes or min(counts) < 0 or sum(counts) < 1:
            raise ValueError("concept counts must be non-negative, one per class, with at least one concept")
        self.num_classes = num_classes
        self.tap_height, self.tap_width, self.tap_depth = tap_height, tap_width, tap_depth
        self.dense_dim = dense_dim
        self.embed_dim = embed_dim
        self.hidden = tuple(hidden)
        self.seed = seed
        self.class_names = list(class_names) if class_names else [str(k) for k in range(num_classes)]
        self.concept_ids = [list(range(c)) for c in counts]

        gen = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.map_weights = nn.ParameterList(
                nn.Parameter(init_map_weights(c, tap_depth, gen, DTYPE, map_init)) for c in counts
            )
            self.embedders = nn.ModuleList(
                make_embedding_net(tap_height * tap_width, embed_dim, hidden) for _ in counts
            )
            self.relevance_weights = nn.ParameterList(
                nn.Parameter(torch.randn(c, embed_dim, generator=gen, dtype=DTYPE) / math.sqrt(embed_dim))
                for c in counts
            )
            self.output = nn.Linear(sum(counts) * embed_dim, dense_dim)
        self.to(DTYPE)

    @classmethod
    def for_blackbox(cls, spec, **kwargs):
        return cls(spec.num_classes, spec.tap_height, spec.tap_width, spec.tap_depth, spec.dense_dim,
                   class_names=spec.class_names, **kwargs)

    @property
    def concept_counts(self):
        return [len(ids) for ids in self.concept_ids]

    def concept_maps(self, x, k):
        return generate_concept_maps(x, self.map_weights[k])

    def forward(self, x):
        """Run every class branch on a batch of taps N x H x W x D."""
        x = torch.as_tensor(x, dtype=DTYPE)
        if tuple(x.shape[1:]) != (self.tap_height, self.tap_width, self.tap_depth):
            raise ValueError(f"tap shape {tuple(x.shape[1:])} does not match model")
        maps, embs, rels = [], [], []
        for k in range(self.num_classes):
            c = generate_concept_maps(x, self.map_weights[k])
            e = embed(c, self.embedders[k])
            maps.append(c)
            embs.append(e)
            rels.append(compute_relevances(e, self.relevance_weights[k]))
        z_hat = reconstruct_dense(embs, self.output.weight, self.output.bias)
        return MaceOutput(maps, embs, rels, z_hat)

    def subset(self, keep):
        """Return a copy keeping, for each class, the local concept indices in ``keep[k]``.

        All parameter slices of dropped concepts are removed, including their
        columns in the output generator.
        """
        if len(keep) != self.num_classes:
            raise ValueError("keep must list indices for every class")
        if not any(keep):
            raise ValueError("cannot drop every concept of every class")
        new = MaceModel(self.num_classes, self.tap_height, self.tap_width, self.tap_depth, self.dense_dim,
                        [len(i) for i in keep], self.embed_dim, self.hidden, self.seed, self.class_names)
        new.concept_ids = [[self.concept_ids[k][i] for i in idx] for k, idx in enumerate(keep)]
        cols = []
        offset = 0
        for k, idx in enumerate(keep):
            for i in idx:
                start = offset + i * self.embed_dim
                cols.extend(range(start, start + self.embed_dim))
            offset += self.concept_counts[k] * self.embed_dim
        cols = torch.tensor(cols, dtype=torch.long)
        with torch.no_grad():
            for k, idx in enumerate(keep):
                idx_t = torch.tensor(idx, dtype=torch.long)
                new.map_weights[k].copy_(self.map_weights[k][idx_t])
                new.relevance_weights[k].copy_(self.relevance_weights[k][idx_t])
                new.embedders[k].load_state_dict(self.embedders[k].state_dict())
            new.output.weight.copy_(self.output.weight[:, cols])
            new.output.bias.copy_(self.output.bias)
        return new

    def arrays(self):
        """Named parameter arrays under the stable checkpoint names."""
        out = {}
        for k in range(self.num_classes):
            out[f"map.class{k}.weight"] = self.map_weights[k]
            out[f"relevance.class{k}.weight"] = self.relevance_weights[k]
            linears = [m for m in self.embedders[k] if isinstance(m, nn.Linear)]
            for i, lin in enumerate(linears):
                out[f"embed.class{k}.layer{i}.weight"] = lin.weight
                out[f"embed.class{k}.layer{i}.bias"] = lin.bias
        out["output.weight"] = self.output.weight
        out["output.bias"] = self.output.bias
        return {name: t.detach().numpy().copy() for name, t in out.items()}

    def manifest(self):
        return {
            "kind": "mace",
            "num_classes": self.num_classes,
            "tap_height": self.tap_height,
            "tap_width": self.tap_width,
            "tap_depth": self.tap_depth,
            "dense_dim": self.dense_dim,
            "embed_dim": self.embed_dim,
            "hidden": list(self.hidden),
            "seed": self.seed,
            "class_names": self.class_names,
            "concept_counts": self.concept_counts,
            "concept_ids": self.concept_ids,
            "embedding_order": "class-major, concept-minor",
            "z_tap": "post-activation",
        }

    def save(self, path, extra=None):
        manifest = self.manifest()
        manifest.update(extra or {})
        save_archive(path, self.arrays(), manifest)

    @classmethod
    def load(cls, path):
        arrays, manifest = load_archive(path)
        if manifest.get("kind") != "mace":
            raise ValueError(f"{path} is not a MACE checkpoint")
        model = cls(manifest["num_classes"], manifest["tap_height"], manifest["tap_width"],
                    manifest["tap_depth"], manifest["dense_dim"], manifest["concept_counts"],
                    manifest["embed_dim"], tuple(manifest["hidden"]), manifest["seed"],
                    manifest["class_names"])
        model.concept_ids = [list(ids) for ids in manifest["concept_ids"]]
        params = model.arrays()
        if set(params) != set(arrays):
            raise ValueError(f"checkpoint arrays do not match model: {sorted(set(params) ^ set(arrays))}")
        with torch.no_grad():
            for k in range(model.num_classes):
                model.map_weights[k].copy_(torch.as_tensor(arrays[f"map.class{k}.weight"]))
                model.relevance_weights[k].copy_(torch.as_tensor(arrays[f"relevance.class{k}.weight"]))
                linears = [m for m in model.embedders[k] if isinstance(m, nn.Linear)]
                for i, lin in enumerate(linears):
                    lin.weight.copy_(torch.as_tensor(arrays[f"embed.class{k}.layer{i}.weight"]))
                    lin.bias.copy_(torch.as_tensor(arrays[f"embed.class{k}.layer{i}.bias"]))
            model.output.weight.copy_(torch.as_tensor(arrays["output.weight"]))
            model.output.bias.copy_(torch.as_tensor(arrays["output.bias"]))
        return model, manifest
