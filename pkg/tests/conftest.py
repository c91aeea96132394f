import numpy as np


def fd_grad(fn, policy, group, step=1e-6):
    """Central finite differences of ``fn(policy)`` w.r.t. one parameter group."""
    base = policy.params()[group].astype(float)
    out = np.zeros_like(base)
    for i in range(base.size):
        up, dn = base.copy(), base.copy()
        up[i] += step
        dn[i] -= step
        out[i] = (fn(policy.with_params({group: up})) - fn(policy.with_params({group: dn}))) / (2 * step)
    return out


# one summary line per acceptance criterion, merging parametrized cases
_criteria: dict[str, list] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1].split("[")[0]
    entry = _criteria.setdefault(name, [True, False])
    if report.when == "call":
        entry[1] = True
    if report.failed:
        entry[0] = False


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria):
        ok, ran = _criteria[name]
        status = "PASS" if ok and ran else ("FAIL" if ran or not ok else "SKIP")
        num = name.split("_")[2]
        label = "_".join(name.split("_")[3:]).replace("_", " ")
        terminalreporter.write_line(f"criterion {num}: {status}  {label}")
