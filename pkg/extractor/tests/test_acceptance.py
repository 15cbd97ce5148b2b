"""Acceptance: extractor round trip against the training package."""

import os
import subprocess
import sys
import time

from aft_extractor.prompts import format_prompt
from aft_extractor.runner import ExtractionJob, extract
from conftest import PRIMARY_SRC


def test_criterion_10_extractor_round_trip(tiny_encoder, text_dataset, tmp_path):
    start = time.time()

    runs = []
    for name in ("first", "second"):
        out = tmp_path / name
        job = ExtractionJob(
            models=[tiny_encoder],
            dataset=text_dataset,
            pooling="cls-token",
            batch_size=8,
            out_dir=str(out),
        )
        runs.append((out, extract(job)))
    byte_identical = runs[0][1] == runs[1][1]

    env = dict(os.environ)
    env["PYTHONPATH"] = PRIMARY_SRC
    result = subprocess.run(
        [sys.executable, "-m", "aft.cli", "probe", "--manifest", str(runs[0][0] / "manifest.json")],
        capture_output=True,
        text=True,
        env=env,
        cwd=tmp_path,
    )
    validator_ok = result.returncode == 0 and "test_accuracy" in result.stdout

    templates_ok = (
        format_prompt("boolq", {"question": "q", "passage": "p"})
        == "Question: q\n Reference: p\n Answer:"
        and format_prompt("sst2", {"sentence": "s"}) == 'Review: "s"\n Sentiment:'
    )

    elapsed = time.time() - start
    ok = byte_identical and validator_ok and templates_ok and elapsed < 300
    print(
        f"{'PASS' if ok else 'FAIL'} criterion 10 (extractor round trip): "
        f"byte-identical reruns {byte_identical}; primary validator exit 0 {validator_ok}; "
        f"templates exact {templates_ok}; {elapsed:.0f}s"
    )
    assert ok, (byte_identical, validator_ok, templates_ok, elapsed)
