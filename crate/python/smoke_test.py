"""Smoke test for the irbindiff extension module.

Builds the module with cargo unless IRBINDIFF_SO points at a built
library, loads it, and exercises parsing, normalization, metrics and a
short synthetic pipeline run.
"""

import importlib.util
import json
import os
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent

IR = """
define i32 @function_2150(i32 %arg1) local_unnamed_addr {
dec_label_pc_2150:
  %0 = icmp eq i32 %arg1, 0
  br i1 %0, label %dec_label_pc_215c, label %dec_label_pc_218c, !insn.addr !0

dec_label_pc_215c:                                ; preds = %dec_label_pc_2150
  %1 = add i32 %arg1, -630
  br label %dec_label_pc_21ac

dec_label_pc_218c:                                ; preds = %dec_label_pc_2150
  store i32 4325376, i32* @global_var_4200, align 4
  br label %dec_label_pc_21ac

dec_label_pc_21ac:                                ; preds = %dec_label_pc_215c, %dec_label_pc_218c
  ret i32 0
}
"""


def load_module():
    so = os.environ.get("IRBINDIFF_SO")
    if so is None:
        subprocess.run(
            ["cargo", "build", "--release", "-p", "irbindiff-py", "--features", "extension-module"],
            cwd=ROOT,
            check=True,
        )
        so = ROOT / "target" / "release" / "libirbindiff.so"
    dest = pathlib.Path(tempfile.mkdtemp()) / "irbindiff.so"
    shutil.copy(so, dest)
    spec = importlib.util.spec_from_file_location("irbindiff", dest)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    ib = load_module()

    funcs = ib.parse_module(IR)
    assert len(funcs) == 1, funcs
    f = funcs[0]
    assert f.name == "function_2150"
    edges = set(f.edges)
    assert ("dec_label_pc_215c", "dec_label_pc_21ac") in edges
    assert ("dec_label_pc_218c", "dec_label_pc_21ac") in edges
    print(f, "instructions:", f.instruction_count())

    toks = ib.process_instruction("br i1 %22, label %dec_label_pc_41d34, label %dec_label_pc_41d28")
    assert " ".join(toks) == "br i1 %22 , label <label> , label <label>", toks
    toks = ib.process_instruction("%278 = add nsw i32 %277, -630")
    assert toks[-1] == "<Negative>", toks
    raw = ib.tokenize("store i32 4325376, i32* %s1.0.reg2mem")
    assert ib.normalize_tokens(raw) == ib.process_instruction("store i32 4325376, i32* %s1.0.reg2mem")

    vocab = ib.Vocabulary([toks, raw])
    ids = vocab.encode(toks)
    assert vocab.decode(ids) == toks
    assert "<Negative>" in vocab

    assert abs(ib.cosine_similarity([1.0, 0.0], [2.0, 0.0]) - 1.0) < 1e-12
    try:
        ib.cosine_similarity([0.0, 0.0], [1.0, 0.0])
    except ValueError:
        pass
    else:
        raise AssertionError("zero vector accepted")
    assert ib.auc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert ib.recall_at_k([1, 3, 20], 10) == 2 / 3
    assert abs(ib.mrr([1, 2, 4]) - (1 + 0.5 + 0.25) / 3) < 1e-12

    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        (tmp / "config.toml").write_text(
            'seed = 3\ntest_fraction = 0.0\ncorpus_dir = "corpus"\nmanifest = "manifest.json"\nwork_dir = "work"\n'
            "[lm]\nlayers = 1\nhidden = 16\nheads = 2\nmax_position = 32\nepochs = 1\nblock_max_len = 32\n"
            "[sampling]\nmax_len = 32\nmax_pairs = 64\n"
            "[ggnn]\nsteps = 2\nnode_dim = 16\nout_dim = 16\nepochs = 2\nqueue_capacity = 32\nbatch_size = 16\n"
            "[eval]\ntasks = [\"XA\"]\nn_pos = 50\nn_neg = 50\npool_size = 11\n"
            "[synth]\nn_groups = 10\nvariants = 4\n"
        )
        p = ib.Pipeline(str(tmp / "config.toml"), ablate=["no_plm"])
        assert p.synth() == 40
        report = json.loads(p.run_all())
        print(json.dumps(report["tasks"], indent=1), report["skipped"])
        assert report["tasks"][0]["task"] == "XA"

    print("smoke test passed")


if __name__ == "__main__":
    sys.exit(main())
