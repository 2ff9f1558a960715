"""Walk the four analytic verification checks and print what each measured.

These are the finite, machine-checkable inequalities the rest of the
laboratory leans on: orbit counts against the exponential packing bound,
the propagator difference against its correction integral, the floor of
the time-averaged multiplier, and the kernel overlap estimates on their
declared grids. Each check prints its worst measured margin, so a pass
here is a quantitative statement, not a smoke test.

Run:  python3 demos/verify_bounds.py
"""
from hyperwave.cli import VERIFY_CHECKS, run_verification


def main():
    records = run_verification(list(VERIFY_CHECKS))
    width = max(len(r["name"]) for r in records)
    for rec in records:
        status = "ok" if rec["passed"] else "FAIL"
        print(f"{rec['name']:<{width}}  {status}")
        for key, value in sorted(rec["detail"].items()):
            if isinstance(value, float):
                print(f"    {key} = {value:.6g}")
            else:
                print(f"    {key} = {value}")
    if not all(r["passed"] for r in records):
        raise SystemExit(1)


if __name__ == "__main__":
    main()
