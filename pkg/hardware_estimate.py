"""
hardware_estimate.py
Project MGD step counts onto hardware wall-clock time.
"""

DEFAULT_OVERHEAD_FACTOR = 2.0   # one baseline plus one perturbed inference per step

HARDWARE_PROFILES = {
    "HW1": {
        "tau_x": 100e-9,
        "tau_p": 1e-3,
        "tau_theta": 1e-3,
        "examples": "chip-in-the-loop, slow (thermal) parameter updates",
    },
    "HW2": {
        "tau_x": 1e-9,
        "tau_p": 10e-9,
        "tau_theta": 1e-6,
        "examples": "on-chip perturbation with memory-limited parameter writes",
    },
    "HW3": {
        "tau_x": 10e-12,
        "tau_p": 200e-12,
        "tau_theta": 200e-12,
        "examples": "fully analog, high-speed perturbation and update",
    },
}

BENCHMARK_STEPS = {
    "2-bit parity": 10**4,
    "Fashion-MNIST": 10**6,
    "CIFAR-10": 10**7,
}


def estimate_time(steps: float, tau_p_seconds: float, overhead_factor: float = DEFAULT_OVERHEAD_FACTOR) -> float:
    """Seconds to run `steps` perturbation periods: overhead_factor * steps * tau_p."""
    for name, value in (("steps", steps), ("tau_p_seconds", tau_p_seconds), ("overhead_factor", overhead_factor)):
        if not value > 0:
            raise ValueError(f"{name} must be positive, got {value}")
    return overhead_factor * steps * tau_p_seconds


def estimate_table(
    profiles: dict = HARDWARE_PROFILES,
    benchmarks: dict = BENCHMARK_STEPS,
    overhead_factor: float = DEFAULT_OVERHEAD_FACTOR,
) -> list[dict]:
    """
    One row per (hardware profile, benchmark).

    Returns dicts with: hardware, task, steps, tau_p, seconds, display
    """
    rows = []
    for hw_name, profile in profiles.items():
        for task, steps in benchmarks.items():
            seconds = estimate_time(steps, profile["tau_p"], overhead_factor)
            rows.append({
                "hardware": hw_name,
                "task": task,
                "steps": steps,
                "tau_p": profile["tau_p"],
                "seconds": seconds,
                "display": format_duration(seconds),
            })
    return rows


def format_duration(seconds: float) -> str:
    """Human-readable duration, e.g. 2e-4 -> '200 µs', 2000 -> '33 min'."""
    if seconds >= 3600:
        return f"{seconds / 3600:.1f} hours"
    if seconds >= 60:
        return f"{seconds / 60:.0f} min"
    for scale, unit in ((1.0, "s"), (1e-3, "ms"), (1e-6, "µs"), (1e-9, "ns")):
        if seconds >= scale * (1 - 1e-9):
            return f"{seconds / scale:.3g} {unit}"
    return f"{seconds / 1e-12:.3g} ps"
