"""Central finite-difference check of autograd gradients."""

import torch


def assert_grads_match_fd(module, loss_fn, rtol=1e-3, atol=1e-7, h=1e-6, per_tensor=4, seed=0):
    """Compare analytic gradients of ``loss_fn()`` with central differences
    on a seeded sample of entries from every parameter tensor that receives
    a gradient.  Runs in whatever dtype ``module`` holds (use float64)."""
    module.zero_grad()
    loss_fn().backward()
    gen = torch.Generator().manual_seed(seed)
    checked = 0
    for name, p in module.named_parameters():
        if p.grad is None:
            continue
        flat, grad = p.data.view(-1), p.grad.view(-1)
        idx = torch.randperm(flat.numel(), generator=gen)[:per_tensor]
        for i in idx.tolist():
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
            fd = (up - down) / (2 * h)
            an = grad[i].item()
            assert abs(fd - an) <= atol + rtol * abs(fd), f"{name}[{i}]: autograd {an} vs fd {fd}"
            checked += 1
    assert checked > 0
