#!/usr/bin/env python3
"""In-interpreter runner for candidate programs.

Reads one JSON document from stdin:

    {"source": str, "time_limit_s": number, "memory_limit_bytes": number,
     "allowlist": [str], "rng_seed": int, "workdir": str}

and writes exactly one JSON line to stdout:

    {"status": str, "answer_text": str|null, "stdout": str, "stderr": str,
     "artifacts": [str], "wall_time_s": number}

status is one of ok / timeout / runtime_error / denied_import /
resource_exceeded / protocol_error. All diagnostic chatter goes to stderr;
the only stdout bytes are the protocol line, even for hostile programs (the
real stdout fd is parked while user code runs). A syntactically invalid
payload exits nonzero with no stdout line at all.

Self-contained on purpose: standard library only, so the execution
environment needs nothing beyond the interpreter plus whatever packages the
allowlist names. The import guard and resource limits are a best-effort
jail for honest code, not a security boundary.
"""

import builtins
import io
import json
import os
import random
import signal
import socket
import sys
import time
import traceback

TRUNCATE_BYTES = 64 * 1024
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".gif", ".bmp", ".svg", ".pdf"}

_REAL_STDOUT_FD = None  # dup of fd 1, installed in main()
_CAPTURE_PATH = None
_STARTED = 0.0
_WORKDIR = None


class ImportDeniedError(ImportError):
    def __init__(self, package):
        super().__init__("denied import: %s" % package)
        self.package = package


def _truncate(text):
    raw = text.encode("utf-8", errors="replace")
    if len(raw) <= TRUNCATE_BYTES:
        return text
    return raw[:TRUNCATE_BYTES].decode("utf-8", errors="replace")


def _scan_artifacts(workdir):
    found = []
    for base, _dirs, names in os.walk(workdir):
        for name in names:
            if os.path.splitext(name)[1].lower() in IMAGE_EXTENSIONS:
                found.append(os.path.join(base, name))
    return sorted(found)


def _read_captured_stdout():
    try:
        sys.stdout.flush()
    except Exception:
        pass
    try:
        with open(_CAPTURE_PATH, "r", encoding="utf-8", errors="replace") as fh:
            return fh.read()
    except OSError:
        return ""


def _emit(status, answer_text, stdout_text, stderr_text):
    """Write the single protocol line to the real stdout and return."""
    artifacts = _scan_artifacts(_WORKDIR) if _WORKDIR and os.path.isdir(_WORKDIR) else []
    result = {
        "status": status,
        "answer_text": answer_text,
        "stdout": _truncate(stdout_text),
        "stderr": _truncate(stderr_text),
        "artifacts": artifacts,
        "wall_time_s": time.monotonic() - _STARTED,
    }
    line = json.dumps(result, ensure_ascii=False) + "\n"
    os.write(_REAL_STDOUT_FD, line.encode("utf-8", errors="replace"))


def _alarm_handler(_signum, _frame):
    # emit directly and hard-exit: user code may be inside a bare `except`
    # that would swallow any exception raised here
    try:
        _emit("timeout", None, _read_captured_stdout(), "wall-clock limit exceeded")
    finally:
        os._exit(0)


def _install_import_guard(allowlist):
    """Reject non-allowlisted top-level imports made by the candidate program.

    The candidate executes as __main__, so an import is attributed to it by
    the __name__ of the globals handed to __import__; imports issued from
    inside library modules (loaders, lazy plugin machinery, and anything an
    allowed package pulls in) keep working.
    """
    allowed = set(allowlist)
    real_import = builtins.__import__

    def guarded_import(name, globals=None, locals=None, fromlist=(), level=0):
        if level == 0:
            top = name.partition(".")[0]
            if top not in allowed:
                # C-extension imports arrive with globals=None; only
                # statements executing as __main__ are the candidate's own
                caller = (globals or {}).get("__name__")
                if caller == "__main__":
                    raise ImportDeniedError(top)
        return real_import(name, globals, locals, fromlist, level)

    builtins.__import__ = guarded_import


def _disable_sockets():
    def refused(*_args, **_kwargs):
        raise OSError("socket creation is disabled")

    socket.socket = refused
    socket.create_connection = refused


def _apply_memory_limit(limit_bytes):
    try:
        import resource
    except ImportError:  # non-POSIX platform
        return
    try:
        resource.setrlimit(resource.RLIMIT_AS, (limit_bytes, limit_bytes))
    except (ValueError, OSError):
        pass


def _last_nonempty_line(text):
    for line in reversed(text.splitlines()):
        if line.strip():
            return line.strip()
    return ""


def run_candidate(payload):
    """Execute the candidate source under the payload's limits and emit the
    protocol line. Never raises."""
    global _WORKDIR
    _WORKDIR = payload["workdir"]
    os.chdir(_WORKDIR)
    os.environ.setdefault("MPLBACKEND", "Agg")

    _apply_memory_limit(int(payload["memory_limit_bytes"]))
    _disable_sockets()

    signal.signal(signal.SIGALRM, _alarm_handler)
    signal.setitimer(signal.ITIMER_REAL, float(payload["time_limit_s"]))

    random.seed(payload["rng_seed"])
    _install_import_guard(payload["allowlist"])

    namespace = {"__name__": "__main__", "__builtins__": builtins}
    status, answer, user_stderr = "ok", None, ""
    try:
        code = compile(payload["source"], "<candidate>", "exec")
        exec(code, namespace)
    except ImportDeniedError as exc:
        status, user_stderr = "denied_import", "denied import: %s" % exc.package
    except MemoryError:
        status, user_stderr = "resource_exceeded", "memory limit exceeded"
    except SystemExit as exc:
        # a clean exit() after printing the answer is normal completion
        if exc.code not in (None, 0):
            status, user_stderr = "runtime_error", "exited with status %r" % exc.code
    except BaseException:
        status, user_stderr = "runtime_error", traceback.format_exc()
    finally:
        signal.setitimer(signal.ITIMER_REAL, 0.0)

    captured = _read_captured_stdout()
    if status == "ok":
        if "answer" in namespace:
            answer = str(namespace["answer"])
        else:
            answer = _last_nonempty_line(captured)
    _emit(status, answer, captured, user_stderr)


def main():
    global _REAL_STDOUT_FD, _CAPTURE_PATH, _STARTED
    _STARTED = time.monotonic()

    raw = sys.stdin.read()
    try:
        payload = json.loads(raw)
        source = payload["source"]
        payload["workdir"] = os.path.abspath(payload["workdir"])
        for key in ("time_limit_s", "memory_limit_bytes", "allowlist", "rng_seed"):
            if key not in payload:
                raise KeyError(key)
        if float(payload["time_limit_s"]) <= 0 or int(payload["memory_limit_bytes"]) <= 0:
            raise ValueError("limits must be positive")
        if not isinstance(source, str) or not os.path.isdir(payload["workdir"]):
            raise ValueError("bad source or workdir")
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        # protocol failure: no stdout line at all, nonzero exit
        sys.stderr.write("unparseable payload: %s\n" % exc)
        sys.exit(2)

    # Park the real stdout and route fd 1 into a capture file so the protocol
    # channel stays clean no matter what user code prints or writes to fd 1.
    _REAL_STDOUT_FD = os.dup(1)
    _CAPTURE_PATH = os.path.join(payload["workdir"], ".captured-stdout.txt")
    capture_fd = os.open(_CAPTURE_PATH, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    os.dup2(capture_fd, 1)
    os.close(capture_fd)
    sys.stdout = io.TextIOWrapper(os.fdopen(1, "wb", closefd=False), encoding="utf-8")

    run_candidate(payload)
    sys.exit(0)


if __name__ == "__main__":
    main()
