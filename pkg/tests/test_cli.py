"""End-to-end tests for the ``gems`` command line."""
import contextlib
import io
import json
import shutil
import subprocess
import tempfile
import unittest
import os
import sys
sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

from pathlib import Path

from gems.cli import EXIT_INPUT, EXIT_OK, main
from gems.settings import PROJECT_ROOT
from tests.helpers import YELP_EDGES, YELP_GENES, YELP_SCHEMA, tiny_search_config, write_text


def run_cli(*argv):
    """Run the CLI, returning the exit code and whatever it printed to stdout."""
    buffer = io.StringIO()
    with contextlib.redirect_stdout(buffer):
        code = main([str(arg) for arg in argv])
    return code, buffer.getvalue()


class TestCli(unittest.TestCase):

    def setUp(self):
        self._tmpdir = Path(tempfile.mkdtemp())
        self.graph_dir = self._tmpdir / "graph"
        code, _ = run_cli("synth", "--seed", 4, "--out", self.graph_dir, "--log-level", "WARNING")
        self.assertEqual(code, EXIT_OK)
        self.config = write_text(self._tmpdir / "tiny.json", tiny_search_config().model_dump_json())

    def tearDown(self):
        shutil.rmtree(self._tmpdir)

    def _data_args(self):
        return ["--schema", self.graph_dir / "schema.json", "--edges", self.graph_dir / "edges.tsv"]

    def test_synth_writes_graph_and_manifest(self):
        for name in ("schema.json", "edges.tsv", "planted_gene.txt", "manifest.json"):
            self.assertTrue((self.graph_dir / name).exists(), name)
        manifest = json.loads((self.graph_dir / "manifest.json").read_text(encoding="utf-8"))
        self.assertEqual(manifest["command"], "synth")
        self.assertEqual(manifest["seed"], 4)

        again = self._tmpdir / "again"
        code, out = run_cli("synth", "--seed", 4, "--out", again, "--log-level", "WARNING")
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(json.loads(out)["planted_gene"], "[U,I,C,I](0-3)(1-2)(2-3)")
        self.assertEqual((again / "edges.tsv").read_bytes(), (self.graph_dir / "edges.tsv").read_bytes())

    def test_search_rejects_zero_generations(self):
        code, _ = run_cli(
            "search", *self._data_args(), "--config", self.config, "--generations", 0,
            "--out", self._tmpdir / "search", "--seed", 1, "--log-level", "CRITICAL",
        )
        self.assertEqual(code, EXIT_INPUT)

    def test_fixed_rejects_empty_genes_file(self):
        genes = write_text(self._tmpdir / "empty.txt", "# nothing here\n")
        code, _ = run_cli(
            "fixed", *self._data_args(), "--config", self.config, "--genes", genes,
            "--out", self._tmpdir / "fixed", "--seed", 1, "--log-level", "CRITICAL",
        )
        self.assertEqual(code, EXIT_INPUT)

    def test_fixed_then_eval(self):
        genes = write_text(self._tmpdir / "genes.txt", "[U,I](0-1)\n[U,I,C,I](0-3)(1-2)(2-3)\n")
        fixed_dir = self._tmpdir / "fixed"
        code, out = run_cli(
            "fixed", *self._data_args(), "--config", self.config, "--genes", genes,
            "--out", fixed_dir, "--seed", 1, "--log-level", "WARNING",
        )
        self.assertEqual(code, EXIT_OK)
        metrics = json.loads((fixed_dir / "metrics.json").read_text(encoding="utf-8"))
        self.assertEqual(json.loads(out)["NDCG@10"], metrics["NDCG@10"])
        self.assertTrue(0.0 <= metrics["NDCG@10"] <= 1.0)
        self.assertTrue((fixed_dir / "checkpoint.npz").exists())

        other = write_text(self._tmpdir / "other.txt", "[U,I](0-1)\n")
        code, _ = run_cli(
            "eval", *self._data_args(), "--checkpoint", fixed_dir / "checkpoint.npz", "--genes", other,
            "--out", self._tmpdir / "eval_bad", "--log-level", "CRITICAL",
        )
        self.assertEqual(code, EXIT_INPUT)

        code, out = run_cli(
            "eval", *self._data_args(), "--checkpoint", fixed_dir / "checkpoint.npz", "--genes", genes,
            "--out", self._tmpdir / "eval", "--log-level", "WARNING",
        )
        self.assertEqual(code, EXIT_OK)
        self.assertIn("NDCG@10", json.loads(out))

    def test_gradcheck_passes(self):
        code, out = run_cli("gradcheck", "--trials", 1, "--out", self._tmpdir / "grad", "--seed", 0)
        self.assertEqual(code, EXIT_OK)
        self.assertTrue(json.loads(out)["passed"])

    def test_inspect_sample_genes(self):
        code, out = run_cli(
            "inspect-genes", "--schema", YELP_SCHEMA, "--edges", YELP_EDGES, "--genes", YELP_GENES,
            "--export-dir", self._tmpdir / "tables", "--out", self._tmpdir / "inspect", "--log-level", "WARNING",
        )
        self.assertEqual(code, EXIT_OK)
        rows = json.loads(out)
        self.assertEqual(len(rows), 5)
        self.assertEqual(rows[0]["key"], "[U,B](0-1)")
        self.assertTrue((self._tmpdir / "tables" / "gene_0.tsv").exists())


class TestEnvironmentFile(unittest.TestCase):
    """Settings come from a .env file in the working directory."""

    def setUp(self):
        self._tmpdir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self._tmpdir)

    def test_env_file_reaches_settings(self):
        out_root = self._tmpdir / "from_env"
        write_text(self._tmpdir / ".env", f"GEMS_BRUTE_FORCE_NODE_LIMIT=3\nGEMS_OUTPUT_DIR={out_root}\n")
        env = {key: value for key, value in os.environ.items() if not key.startswith("GEMS_")}
        env["PYTHONPATH"] = os.pathsep.join(filter(None, [str(PROJECT_ROOT), env.get("PYTHONPATH")]))
        completed = subprocess.run(
            [sys.executable, "-m", "gems", "gradcheck", "--trials", "1", "--seed", "0", "--log-level", "WARNING"],
            cwd=self._tmpdir,
            env=env,
            capture_output=True,
            text=True,
            timeout=600,
        )
        self.assertEqual(completed.returncode, EXIT_OK, completed.stderr)
        manifest = json.loads((out_root / "gradcheck" / "manifest.json").read_text(encoding="utf-8"))
        self.assertEqual(manifest["settings"]["brute_force_node_limit"], 3)


if __name__ == "__main__":
    unittest.main()
