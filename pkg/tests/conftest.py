ACCEPTANCE_CRITERIA = {
    "test_c01_parameter_count_anchors": "1 parameter-count anchors (1,792 / 2,359,808)",
    "test_c02_spatial_chain_anchor": "2 spatial chain 150-75-37-18-9-4, flatten 8192",
    "test_c03_gradient_correctness": "3 gradient checks < 1e-6 (100 instances per kind)",
    "test_c04_conv_oracle_equivalence": "4 im2col vs naive conv < 1e-9 (50 trials)",
    "test_c05_freeze_contract": "5 frozen blocks bit-identical after fine-tune",
    "test_c06_cache_equivalence": "6 cached-feature vs attached-head training < 1e-9",
    "test_c07_overall_accuracy_identity": "7 two-class rate identity reproduces 0.9072",
    "test_c08_label_scheme_mapping": "8 label scheme mappings and composition",
    "test_c09_end_to_end_transfer": "9 synthetic transfer: median >= 0.90, fine >= head",
    "test_c10_datasize_trend": "10 data-size medians rise, spread shrinks",
    "test_c11_freeze_depth_trend": "11 freeze-depth accuracy/time trends",
    "test_c12_cli_determinism": "12 CLI reruns byte-identical",
}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = {}
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            name = report.nodeid.split("::")[-1]
            if name in ACCEPTANCE_CRITERIA:
                results[name] = "PASS" if status == "passed" else "FAIL"
    if not results:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, label in ACCEPTANCE_CRITERIA.items():
        if name in results:
            terminalreporter.write_line(f"{results[name]}  criterion {label}")
