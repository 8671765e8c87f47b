"""Per-criterion detail lines collected by the acceptance tests."""

TITLES = {
    1: "occlusion degradation",
    2: "feedback gain",
    3: "saturation in K2 and iterations",
    4: "scheme ordering",
    5: "RBM baseline failure",
    6: "augmentation gain",
    7: "complexity counters",
    8: "property suites",
}
BUDGETS = {1: 30 * 60, 8: 5 * 60}  # seconds
DETAILS: dict[int, list[str]] = {}


def record(n: int, text: str) -> None:
    DETAILS.setdefault(n, []).append(text)
    print(f"[criterion {n}] {text}")
