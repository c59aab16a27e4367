import re
import subprocess
import sys
import time

from hetrade import cli
from hetrade.protocol import decode_message

TAG = re.compile(r"^[A-Z_]+: ")


def hetrade(*args):
    return [sys.executable, "-m", "hetrade", *map(str, args)]


def run(*args, timeout=120):
    return subprocess.run(hetrade(*args), capture_output=True, text=True, timeout=timeout)


def pair(seller_args, buyer_args, timeout=120):
    """Run seller and buyer as separate processes; return both completed results."""
    seller = subprocess.Popen(hetrade("seller", *seller_args), stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    try:
        buyer = subprocess.run(hetrade("buyer", *buyer_args), capture_output=True, text=True, timeout=timeout)
        out, err = seller.communicate(timeout=timeout)
    finally:
        if seller.poll() is None:
            seller.kill()
    return subprocess.CompletedProcess(seller.args, seller.returncode, out, err), buyer


def socket_pair(tmp_path, seller_args, buyer_args):
    tmp_path.mkdir(parents=True, exist_ok=True)
    port_file = tmp_path / "port"
    seller = subprocess.Popen(
        hetrade("seller", "--listen", "127.0.0.1:0", "--port-file", port_file, *seller_args),
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
    )
    try:
        deadline = time.monotonic() + 60
        while not (port_file.exists() and port_file.read_text()):
            if time.monotonic() > deadline or seller.poll() is not None:
                raise RuntimeError("seller never started listening")
            time.sleep(0.05)
        port = port_file.read_text().strip()
        buyer = subprocess.run(hetrade("buyer", "--connect", f"127.0.0.1:{port}", *buyer_args), capture_output=True, text=True, timeout=120)
        out, err = seller.communicate(timeout=120)
    finally:
        if seller.poll() is None:
            seller.kill()
    return subprocess.CompletedProcess(seller.args, seller.returncode, out, err), buyer


def report(stdout):
    return dict(line.split("=", 1) for line in stdout.splitlines() if "=" in line and not line.startswith(" "))


# --- demo -----------------------------------------------------------------------------


def test_demo_default(tmp_path):
    r = run("demo", "--seed", 1, "--workdir", tmp_path, "--no-pause")
    assert r.returncode == 0, r.stderr
    assert "============Company A============" in r.stdout
    assert "Step 6-3. Perform Rotate-sum" in r.stdout
    assert "True Labels: 0   &   1" in r.stdout
    assert "milliseconds" in r.stdout
    m = re.search(r"Decrypted Result: (\S+)\s+&\s+(\S+)", r.stdout)
    assert abs(float(m.group(1)) + 3.736) <= 5e-2 and abs(float(m.group(2)) - 1.206) <= 5e-2
    assert (tmp_path / "test.galk").read_bytes()[:4] == b"HETM"
    assert (tmp_path / "test.ct").read_bytes()[:4] == b"HETM"


def test_demo_seed_reproducible(tmp_path):
    lines = []
    for sub in ("a", "b"):
        r = run("demo", "--seed", 7, "--workdir", tmp_path / sub, "--no-pause")
        lines.append([ln for ln in r.stdout.splitlines() if ln.startswith(("Results", "Decrypted"))])
    assert lines[0] == lines[1] and lines[0]


def test_demo_flood_over_headroom(tmp_path):
    r = run("demo", "--flood-bits", 20, "--workdir", tmp_path, "--no-pause")
    assert r.returncode == 5
    assert r.stderr.startswith("CONFIG_ERROR: ")
    assert len(r.stderr.strip().splitlines()) == 1
    assert not (tmp_path / "test.ct").exists()


def test_demo_bad_tolerance():
    assert cli.main(["demo", "--tolerance", "inf", "--no-pause"]) == 5


# --- two-process mode --------------------------------------------------------------------


def test_dir_honest(tmp_path):
    s, b = pair(["--dir", tmp_path, "--seed", 1], ["--dir", tmp_path, "--seed", 2, "--report", tmp_path / "report.txt"])
    assert s.returncode == 0, s.stderr
    assert b.returncode == 0, b.stderr
    assert report(b.stdout)["verdict"] == "HONEST"
    assert (tmp_path / "report.txt").read_text().startswith("verdict=HONEST")
    names = sorted(p.name for p in tmp_path.glob("msg-*.bin"))
    assert names == ["msg-02-params.bin", "msg-04-query-1.bin", "msg-05-result-1.bin", "msg-07-payment.bin", "msg-08-delivery.bin"]
    assert all((tmp_path / n.replace(".bin", ".ready")).exists() for n in names)


def test_dir_cheat_detected(tmp_path):
    s, b = pair(["--dir", tmp_path, "--seed", 1, "--cheat", 0.1], ["--dir", tmp_path, "--seed", 2])
    assert s.returncode == 0
    assert b.returncode == 3
    assert float(report(b.stdout)["max_deviation"]) >= 2.5
    assert b.stderr.startswith("CHEATED: ")


def test_socket_honest_and_cheat(tmp_path):
    s, b = socket_pair(tmp_path / "h", ["--seed", 1], ["--seed", 2])
    assert (s.returncode, b.returncode) == (0, 0), (s.stderr, b.stderr)
    s, b = socket_pair(tmp_path / "c", ["--seed", 1, "--cheat", 0.1], ["--seed", 2])
    assert b.returncode == 3
    assert float(report(b.stdout)["max_deviation"]) >= 2.5


def test_file_and_socket_envelopes_identical(tmp_path):
    files = tmp_path / "files"
    files.mkdir()
    s, b = pair(["--dir", files, "--seed", 11], ["--dir", files, "--seed", 12])
    assert (s.returncode, b.returncode) == (0, 0)
    sock_dir = tmp_path / "sock"
    tx = tmp_path / "tx"
    s, b = socket_pair(sock_dir, ["--seed", 11, "--transcript", tx], ["--seed", 12, "--transcript", tx])
    assert (s.returncode, b.returncode) == (0, 0)
    file_msgs = {p.name: p.read_bytes() for p in files.glob("msg-*.bin")}
    sock_msgs = {p.name: p.read_bytes() for p in tx.glob("msg-*.bin")}
    assert file_msgs.keys() == sock_msgs.keys() and len(file_msgs) == 5
    for name in file_msgs:
        assert file_msgs[name] == sock_msgs[name], name


def test_buyer_declines_over_price(tmp_path):
    s, b = socket_pair(tmp_path, ["--seed", 1], ["--seed", 2, "--max-price", "0.5"])
    assert b.returncode == 6 and b.stderr.startswith("DECLINED: ")
    assert s.returncode == 6 and s.stderr.startswith("DECLINED: ")


def test_buyer_declines_reduced_security(tmp_path):
    s, b = pair(
        ["--dir", tmp_path, "--seed", 1, "--security", "reduced-ok", "--prime-bits", "40,40,35"],
        ["--dir", tmp_path, "--seed", 2],
    )
    assert b.returncode == 6 and "insufficient security" in b.stderr
    abort = decode_message((tmp_path / "msg-03-abort.bin").read_bytes())
    assert "exceed" in abort.reason


def test_seller_refuses_reused_directory(tmp_path):
    (tmp_path / "msg-02-params.bin").write_bytes(b"old")
    r = run("seller", "--dir", tmp_path, "--seed", 1)
    assert r.returncode == 5 and r.stderr.startswith("CONFIG_ERROR: ")


def test_seller_requires_opt_in_for_reduced_params(tmp_path):
    r = run("seller", "--dir", tmp_path, "--prime-bits", "40,40,35")
    assert r.returncode == 5 and "InsecureParams" in r.stderr


def test_transport_timeout(tmp_path):
    r = run("buyer", "--dir", tmp_path, "--timeout", "0.3")
    assert r.returncode == 4 and r.stderr.startswith("TRANSPORT_ERROR: ")


def test_record_cap_refusal(tmp_path):
    csv = tmp_path / "records.csv"
    csv.write_text("25,120,80,156,67,136,0\n56,141,100,428,65,171,1\n")
    work = tmp_path / "w"
    work.mkdir()
    s, b = pair(["--dir", work, "--seed", 1, "--record-cap", 1], ["--dir", work, "--seed", 2, "--records", csv], timeout=30)
    # the buyer checks the announced cap itself, aborts, and never sends the oversized query
    assert b.returncode == 2 and b.stderr.startswith("PROTOCOL_VIOLATION: ")
    assert "RecordCapExceeded" in b.stderr
    assert s.returncode == 6 and not list(work.glob("msg-04-query*"))


def test_every_failure_is_one_tagged_line(tmp_path):
    for args in (["demo", "--flood-bits", "40", "--no-pause"], ["buyer", "--dir", tmp_path, "--timeout", "0.2"], ["seller"]):
        r = run(*args)
        assert r.returncode != 0
        lines = r.stderr.strip().splitlines()
        assert len(lines) == 1 and TAG.match(lines[0]), r.stderr


def test_extraction_cli(tmp_path):
    out = tmp_path / "report.txt"
    r = run("extraction", "--features", 6, "--queries", 1, "--record-cap", 256, "--trials", 1, "--out", out)
    assert r.returncode == 0, r.stderr
    kv = report(out.read_text())
    assert kv["success_rate"] == "1.0" and kv["binding_defense"] == "record_cap" and kv["batching_loophole"] == "1"
