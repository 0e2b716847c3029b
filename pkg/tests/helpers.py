"""Instance builders shared by the test modules."""

from __future__ import annotations

import dataclasses

import numpy as np

from dro_opf.network import (
    ControllableDevice,
    DeviceCost,
    Line,
    LocalConstraints,
    NetworkCase,
    UncontrollableInjection,
)


def generator(dev_id, bus, lin=1.0, quad=1.0, T=None):
    return ControllableDevice(
        id=dev_id, bus=bus, A_step=np.array([[0.0]]), B_step=np.array([[1.0]]), x0=np.array([0.0]),
        cost=DeviceCost(f_u=np.array([lin]), H_u=np.array([[quad]])),
    )


def battery(dev_id, bus, soc0=1.0, cap=2.0, quad=0.5, lin=0.1):
    """Two states ``[p, soc]``: injection equals the input, discharging lowers SOC."""
    return ControllableDevice(
        id=dev_id, bus=bus,
        A_step=np.array([[0.0, 0.0], [0.0, 1.0]]), B_step=np.array([[1.0], [-1.0]]),
        x0=np.array([0.0, soc0]),
        cost=DeviceCost(f_u=np.array([lin]), H_u=np.array([[quad]])),
        local=LocalConstraints(
            T_loc=np.array([[0.0, 1.0], [0.0, -1.0]]), U_loc=np.zeros((2, 1)), Z_loc=np.zeros((2, 1)),
            w=np.array([cap, 0.0]),
        ),
    )


def two_bus_case(T=1, limit=1.0, same_step=True, G_scale=1.0, r_wind=0.5, r_load=-1.5, monitored=None):
    """Generators at both buses, load and wind at bus 2, slack at bus 1."""
    G = G_scale * (np.eye(T) if same_step else np.eye(T, k=-1))
    return NetworkCase(
        buses=(1, 2), slack=1,
        lines=(Line(1, 2, 0.1, limit),),
        devices=(generator("g1", 1, lin=1.0, quad=1.0), generator("g2", 2, lin=0.5, quad=2.0)),
        injections=(
            UncontrollableInjection("load", 2, np.full(T, r_load), np.zeros((T, T))),
            UncontrollableInjection("wind", 2, np.full(T, r_wind), G),
        ),
        T=T, N_xi=1, monitored_lines=monitored, same_step_recourse=same_step, name="two-bus",
    )


TINY_SAMPLES = np.array([[-0.4], [0.7]])


def tiny_case():
    """The N_s = 2 oracle instance: 2 buses, 2 generators, wind at bus 2, T = 1."""
    return two_bus_case(T=1, limit=0.6, same_step=True)


def random_case(rng: np.random.Generator) -> NetworkCase:
    """At most 3 buses and T <= 2, with a random mix of strict and same-step causality."""
    n_bus = int(rng.integers(2, 4))
    T = int(rng.integers(1, 3))
    same_step = bool(T == 1 or rng.random() < 0.5)
    buses = tuple(range(1, n_bus + 1))
    if n_bus == 2:
        lines = (Line(1, 2, float(rng.uniform(0.05, 0.3)), float(rng.uniform(0.3, 1.5))),)
    else:
        lines = tuple(
            Line(a, b, float(rng.uniform(0.05, 0.3)), float(rng.uniform(0.3, 1.5)))
            for a, b in ((1, 2), (2, 3), (1, 3))
        )
    n_dev = int(rng.integers(1, 3))
    devices = [
        ControllableDevice(
            id=f"g{j}", bus=int(rng.choice(buses)), A_step=np.array([[0.0]]), B_step=np.array([[1.0]]),
            x0=np.array([0.0]),
            cost=DeviceCost(f_u=np.array([rng.uniform(0.5, 2.0)]), H_u=np.array([[rng.uniform(0.2, 2.0)]])),
        )
        for j in range(n_dev)
    ]
    if rng.random() < 0.4:
        devices.append(battery("bat", int(rng.choice(buses)), soc0=float(rng.uniform(0.2, 1.0)), cap=1.0))
    G = rng.uniform(0.5, 1.5) * (np.eye(T) if same_step else np.eye(T, k=-1))
    injections = (
        UncontrollableInjection("load", int(rng.choice(buses)), -rng.uniform(0.5, 1.5, T), np.zeros((T, T))),
        UncontrollableInjection("wind", int(rng.choice(buses)), rng.uniform(0.0, 0.5, T), G),
    )
    slack = int(rng.choice(buses))
    return NetworkCase(buses, slack, lines, tuple(devices), injections, T, 1, None, same_step, "random")


def random_samples(rng: np.random.Generator, n: int, dim: int, scale: float = 0.3) -> np.ndarray:
    return scale * rng.standard_t(df=5, size=(n, dim))


# "CRITERION n: PASS|FAIL name (detail)" lines collected by the acceptance suite
ACCEPTANCE_LINES: list[str] = []


STORAGE_LOAD = np.array([-1.0, -1.8, -0.6, -1.4])


def storage_case(same_step=True, cap=2.0):
    """Two buses with a battery and a time-varying load profile, one entry per step."""
    T = STORAGE_LOAD.size
    base = two_bus_case(T=T, same_step=same_step, limit=1.5)
    load = UncontrollableInjection("load", 2, STORAGE_LOAD.copy(), np.zeros((T, T)))
    return dataclasses.replace(
        base,
        injections=(load, base.injections[1]),
        devices=(*base.devices, battery("bat", 2, soc0=1.0, cap=cap, quad=0.3, lin=-0.05)),
    )
