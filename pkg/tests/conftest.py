from __future__ import annotations

import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, Optional

import pytest

from servetune_api.deps import reset_deps
from servetune_core.backends.sim import SimBackend, SimServerModel
from servetune_core.flows.base import FlowContext
from servetune_core.models import LoadPattern, RequestRecord, RequestStatus, RuntimeConfig


@pytest.fixture(autouse=True)
def _fresh_settings():
    reset_deps()
    yield
    reset_deps()


@pytest.fixture
def ok_record() -> Callable[..., RequestRecord]:
    def build(
        request_id: int,
        arrival: float,
        latency: float,
        ttft: Optional[float] = None,
        tokens: int = 2,
    ) -> RequestRecord:
        first = arrival + (latency if ttft is None else ttft)
        return RequestRecord(
            request_id=request_id,
            arrival_ts=arrival,
            first_token_ts=min(first, arrival + latency),
            completion_ts=arrival + latency,
            output_tokens=tokens,
            status=RequestStatus.OK,
        )

    return build


@pytest.fixture
def small_pattern() -> LoadPattern:
    return LoadPattern(input_len=32, output_len=4, duration=2.0)


@pytest.fixture
def single_slot_pattern() -> LoadPattern:
    return LoadPattern(input_len=100, output_len=1, duration=30.0)


@pytest.fixture
def single_slot_model() -> SimServerModel:
    return SimServerModel(
        config=RuntimeConfig(max_num_seqs=1, max_batched_tokens=8192, max_context=4096),
        decode_step_base=0.0625,
        prefill_rate=1600.0,
    )


@pytest.fixture
def single_slot_backend(single_slot_model: SimServerModel) -> SimBackend:
    return SimBackend(single_slot_model)


@pytest.fixture
def flow_ctx(tmp_path: Path) -> FlowContext:
    return FlowContext(archive_dir=tmp_path / "archives", workspace_dir=tmp_path / "workspace")


@pytest.fixture
def tiny_params() -> Dict[str, Any]:
    """flow_params for a quantize_tune job that runs in well under a second."""
    return {
        "quantization_recipe": "tiny_w8a8",
        "recipes": [{"name": "tiny_w8a8", "scheme": "int_w8a8", "calibration_samples": 8}],
        "num_trials": 5,
        "corpus": {"size": 64, "min_len": 8, "max_len": 32},
        "mock": {"compression": {"base_cost": 1.0, "cost_per_sample": 0.0}},
        "load_pattern": {"input_len": 32, "output_len": 4, "duration": 2},
        "sweep": {"initial_rate": 8, "budget": 3},
        "tuner": {
            "n_trials": 2,
            "max_num_seqs_range": [16, 64],
            "max_batched_tokens_range": [512, 1024],
        },
    }


@pytest.fixture
def tiny_job(tiny_params: Dict[str, Any]) -> Dict[str, Any]:
    return {
        "name": "tiny-quantize-tune",
        "flow": "quantize_tune",
        "model": "acme/tiny-llm",
        "flow_params": tiny_params,
        "resources": 2,
        "seed": 7,
    }


STALL_SECONDS = 1.5


class _StallingHandler(BaseHTTPRequestHandler):
    """Streams one chat chunk, then goes quiet for ``STALL_SECONDS``."""

    def log_message(self, format: str, *args: Any) -> None:
        pass

    def do_GET(self) -> None:
        body = b'{"data": [{"id": "tiny"}]}'
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self) -> None:
        self.rfile.read(int(self.headers.get("Content-Length", 0)))
        self.send_response(200)
        self.send_header("Content-Type", "text/event-stream")
        self.end_headers()
        try:
            self.wfile.write(b'data: {"choices": [{"delta": {"content": "t0"}}]}\n\n')
            self.wfile.flush()
            time.sleep(STALL_SECONDS)
            self.wfile.write(b"data: [DONE]\n\n")
        except (BrokenPipeError, ConnectionResetError):
            pass


@pytest.fixture
def stalling_server() -> Iterator[str]:
    """Base URL of a local server whose completion streams stall."""
    server = ThreadingHTTPServer(("127.0.0.1", 0), _StallingHandler)
    server.daemon_threads = True
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, port = server.server_address[:2]
    yield f"http://{host}:{port}/v1"
    server.shutdown()
    server.server_close()
    thread.join(timeout=5)
