"""Output generator: reconstruct the dense-layer output from all concept embeddings."""

import torch

Q_CLAMP = 1e-9


def flatten_embeddings(embeddings):
    """Concatenate per-class (N x) C_k x Q embeddings class-major, concept-minor."""
    if isinstance(embeddings, (list, tuple)):
        return torch.cat([e.reshape(*e.shape[:-2], -1) for e in embeddings], dim=-1)
    embeddings = torch.as_tensor(embeddings)
    return embeddings.reshape(*embeddings.shape[:-3], -1)


def reconstruct_dense(embeddings, weight, bias):
    """Affine map of the flattened embeddings to R^L (no activation)."""
    flat = flatten_embeddings(embeddings)
    weight = torch.as_tensor(weight, dtype=flat.dtype)
    if flat.shape[-1] != weight.shape[1]:
        raise ValueError(f"flattened embeddings have width {flat.shape[-1]}, weight expects {weight.shape[1]}")
    return flat @ weight.T + torch.as_tensor(bias, dtype=flat.dtype)


def reconstruction_loss(z, z_hat):
    """Squared L2 distance, summed over any leading batch axes."""
    z, z_hat = torch.as_tensor(z), torch.as_tensor(z_hat)
    if z.shape != z_hat.shape:
        raise ValueError(f"shape mismatch {tuple(z.shape)} vs {tuple(z_hat.shape)}")
    return ((z - z_hat) ** 2).sum()


def output_divergence(p, q, validate=True):
    """KL(p || q) summed over rows; p is f(z_hat), q is f(z)."""
    p, q = torch.as_tensor(p), torch.as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(q.shape)}")
    if validate:
        for name, v in (("p", p), ("q", q)):
            if torch.any(v < 0) or torch.any((v.sum(-1) - 1).abs() > 1e-6):
                raise ValueError(f"{name} is not a probability vector")
    return (torch.xlogy(p, p) - p * torch.log(q.clamp_min(Q_CLAMP))).sum()
