"""Closed-form references shared by the unit and acceptance tests."""
import torch

MU, S2 = 3.0, 0.25


def gaussian_velocity(x_t, t, mu=MU, s2=S2):
    """E[eps - x | x_t] for x ~ N(mu, s2), eps ~ N(0, 1), x_t = (1 - t) x + t eps.

    Joint-Gaussian conditioning: Cov(eps, x_t) = t, Cov(x, x_t) = (1 - t) s2,
    Var(x_t) = (1 - t)^2 s2 + t^2, E[x_t] = (1 - t) mu.
    """
    var = (1 - t) ** 2 * s2 + t ** 2
    gain = (t - (1 - t) * s2) / var
    return -mu + gain * (x_t - (1 - t) * mu)


def moment_error(samples, mu=MU, s2=S2):
    s = samples.double().reshape(-1)
    return abs(float(s.mean()) - mu) + abs(float(s.std()) - s2 ** 0.5)


def loop_joint_loss(model, class_ids, latents, t, eps, drop=None):
    """Per-position oracle: encode once, then average flow_loss over (sequence, position)."""
    batch, n_img = latents.shape[:2]
    total = 0.0
    for b in range(batch):
        ids = class_ids[b:b + 1]
        refs = [latents[b:b + 1, i] for i in range(n_img - 1)]
        inp = model.assemble_mrar(ids, refs) if refs else model.assemble_1step(ids)
        conds = model.encode_conditions(inp)
        for i in range(n_img):
            x, e, ti = latents[b, i], eps[b, i], t[b, i]
            x_t = (1 - ti) * x + ti * e
            cond = None if (drop is not None and bool(drop[b])) else conds[i]
            v = model.decode_velocity(x_t[None], ti, cond)[0]
            total = total + ((e - x - v) ** 2).mean()
    return total / (batch * n_img)
