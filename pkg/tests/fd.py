"""Central finite differences over generator parameters, independent of autograd."""
import torch


def flat_params(module):
    return [p for p in module.parameters() if p.requires_grad]


def _eval(loss_fn):
    with torch.no_grad():
        return float(loss_fn())


def directional_fd(module, loss_fn, direction, h=1e-6):
    params = flat_params(module)
    chunks = torch.split(direction, [p.numel() for p in params])

    def shift(sign):
        with torch.no_grad():
            for p, d in zip(params, chunks):
                p.add_(sign * h * d.view_as(p))

    shift(+1)
    up = _eval(loss_fn)
    shift(-2)
    down = _eval(loss_fn)
    shift(+1)
    return (up - down) / (2 * h)


def analytic_grad(module, loss_fn):
    params = flat_params(module)
    for p in params:
        p.grad = None
    loss_fn().backward()
    return torch.cat([(p.grad if p.grad is not None else torch.zeros_like(p)).flatten() for p in params])


def gradient_errors(module, loss_fn, n_directions=4, n_coords=24, seed=0, h=1e-6):
    """Relative errors of autograd against finite differences.

    Returns (directional errors, coordinate-block error): one relative error per
    random direction, and a vector-norm relative error over random coordinates.
    """
    g = torch.Generator().manual_seed(seed)
    grad = analytic_grad(module, loss_fn).detach()
    n = grad.numel()
    dir_errs = []
    for _ in range(n_directions):
        v = torch.randn(n, generator=g, dtype=grad.dtype)
        v /= v.norm()
        fd = directional_fd(module, loss_fn, v, h)
        an = float(grad @ v)
        dir_errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-12))
    idx = torch.randperm(n, generator=g)[:n_coords]
    fd_vec, an_vec = [], []
    for i in idx.tolist():
        e = torch.zeros(n, dtype=grad.dtype)
        e[i] = 1.0
        fd_vec.append(directional_fd(module, loss_fn, e, h))
        an_vec.append(float(grad[i]))
    fd_vec, an_vec = torch.tensor(fd_vec), torch.tensor(an_vec)
    coord_err = float((fd_vec - an_vec).norm() / max(float(an_vec.norm()), 1e-12))
    return dir_errs, coord_err
