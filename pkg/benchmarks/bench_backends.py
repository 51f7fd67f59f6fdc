"""Compare the compiled and pure-numpy kernel backends.

Times the two hot kernels (batched epidemic rollout and dilated causal
convolution, forward and backward) plus one full training step, verifying
on the way that both backends agree numerically.

    python3 benchmarks/bench_backends.py [--repeats 5] [--batch 32]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from epicast import datasets, kernels, metapop, training
from epicast.autodiff import Tensor
from epicast.pipeline import ForecastModel, ModelConfig


def timed(fn, repeats: int) -> float:
    fn()  # warm-up: touches any lazy compilation
    best = np.inf
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench_rollout(rng: np.random.Generator, repeats: int, batch: int):
    n, horizon = 8, 14
    pop = rng.uniform(5e4, 5e5, size=n)
    infected = pop * rng.uniform(0.001, 0.02, size=n)
    recovered = pop * rng.uniform(0.0, 0.1, size=n)
    s0 = np.tile(pop - infected - recovered, (batch, 1))
    i0 = np.tile(infected, (batch, 1))
    r0 = np.tile(recovered, (batch, 1))
    beta = rng.uniform(0.05, 0.45, size=(batch, n, horizon))
    gamma = rng.uniform(0.05, 0.2, size=(batch, n, horizon))
    flows = rng.uniform(0.0, 1.0, size=(batch, n, n, horizon)) * 1e3

    results = {}
    timings = {}
    for backend in kernels.available_backends():
        kernels.use(backend)

        def forward_backward():
            beta_t = Tensor(beta, requires_grad=True)
            cases, _ = metapop.rollout_batch(s0, i0, r0, beta_t, gamma, flows, pop)
            cases.sum().backward()
            return np.asarray(cases.data), beta_t.grad

        def forward_only():
            out, _ = metapop.rollout_batch(s0, i0, r0, beta, gamma, flows, pop)
            return out

        timings[backend] = (
            timed(forward_only, repeats),
            timed(forward_backward, repeats),
        )
        results[backend] = forward_backward()
    return timings, results


def bench_conv(rng: np.random.Generator, repeats: int, batch: int):
    hid, taps, dilation, t = 16, 2, 4, 14
    xpad = rng.normal(size=(batch, 8, t + taps * dilation, hid))
    weight = rng.normal(size=(taps, hid, hid)) * 0.1
    bias = rng.normal(size=hid) * 0.1

    results = {}
    timings = {}
    for backend in kernels.available_backends():
        kern = kernels.use(backend)

        def forward_only():
            return kern.conv_fwd(xpad, weight, bias, dilation)

        def forward_backward():
            out = kern.conv_fwd(xpad, weight, bias, dilation)
            return (out, *kern.conv_bwd(np.ones_like(out), xpad, weight, dilation))

        timings[backend] = (
            timed(forward_only, repeats),
            timed(forward_backward, repeats),
        )
        results[backend] = forward_backward()
    return timings, results


def bench_train_step(repeats: int):
    config = ModelConfig()
    scenario = datasets.SyntheticScenario(seed=11, n_regions=8, length=120)
    dataset = datasets.generate_synthetic(scenario)
    windows = datasets.windowize(dataset, config.t_in, config.t_out)
    train_config = training.TrainConfig(batch_size=16, max_epochs=1, seed=11)

    timings = {}
    losses = {}
    for backend in kernels.available_backends():
        kernels.use(backend)
        model = ForecastModel(config, dataset.n_regions, seed=11)
        obs = windows.observations
        model.set_scaler(obs.mean(axis=(0, 1, 2)), obs.std(axis=(0, 1, 2)))
        optimizer = training.Adam(model.parameters(), train_config)
        batch = windows.batch(np.arange(16))

        def step():
            model.zero_grad()
            result = model.forward(batch, training=True)
            loss = training.mae_loss(result.cases, batch.targets)
            loss.backward()
            optimizer.step()
            model.clamp_blend()
            return float(loss.data)

        timings[backend] = timed(step, repeats)
        losses[backend] = step()
    return timings, losses


def check_agreement(results: dict, what: str) -> None:
    names = list(results)
    if len(names) < 2:
        return
    ref = results[names[0]]
    for other in names[1:]:
        for a, b in zip(ref, results[other]):
            np.testing.assert_allclose(
                np.asarray(a), np.asarray(b), rtol=1e-10, atol=1e-10,
                err_msg=f"{what}: {names[0]} vs {other} disagree",
            )
    print(f"  agreement: {what} outputs match across backends (rtol 1e-10)")


def fmt(seconds: float) -> str:
    return f"{seconds * 1e3:8.2f} ms"


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--batch", type=int, default=32)
    args = parser.parse_args()

    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)}")
    if len(backends) == 1:
        print("(numba unavailable; timing the numpy path only)")
    rng = np.random.default_rng(2718)

    print(f"\nepidemic rollout (batch {args.batch}, 8 regions, 14 days)")
    timings, results = bench_rollout(rng, args.repeats, args.batch)
    for backend, (fwd, fwd_bwd) in timings.items():
        print(f"  {backend:>6}: forward {fmt(fwd)}   forward+adjoint {fmt(fwd_bwd)}")
    check_agreement(results, "rollout")

    print(f"\ndilated causal convolution (batch {args.batch}, width 16)")
    timings, results = bench_conv(rng, args.repeats, args.batch)
    for backend, (fwd, fwd_bwd) in timings.items():
        print(f"  {backend:>6}: forward {fmt(fwd)}   forward+backward {fmt(fwd_bwd)}")
    check_agreement(results, "convolution")

    print("\nfull optimizer step (default model, batch 16)")
    timings, losses = bench_train_step(args.repeats)
    for backend, seconds in timings.items():
        print(f"  {backend:>6}: {fmt(seconds)}")
    if len(losses) == 2:
        a, b = losses.values()
        drift = abs(a - b) / max(abs(a), 1e-12)
        print(f"  agreement: post-step losses within {drift:.2e} relative")


if __name__ == "__main__":
    main()
