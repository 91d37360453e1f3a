import os

# Pin BLAS threading before numpy is imported anywhere: the matrices in this
# suite are small, so threaded kernels only add noise and oversubscription
# when tests parallelize at the process level.
for _var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    os.environ.setdefault(_var, "1")

# One line per acceptance criterion, printed in the terminal summary so the
# pass/fail record is visible even when captured output is hidden.
ACCEPTANCE_RESULTS: list[str] = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    status = "PASS" if passed else "FAIL"
    ACCEPTANCE_RESULTS.append(f"{status} {name}: {detail}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
