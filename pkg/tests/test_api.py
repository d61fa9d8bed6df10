import copy

import pytest
import yaml
from fastapi.testclient import TestClient

from servetune_api.deps import get_flow_context
from servetune_api.main import app


@pytest.fixture
def client(flow_ctx):
    app.dependency_overrides[get_flow_context] = lambda: flow_ctx
    with TestClient(app) as c:
        yield c
    app.dependency_overrides.clear()


def test_health(client):
    resp = client.get("/health")
    assert resp.status_code == 200
    assert resp.json() == {"status": "ok"}


def test_list_flows(client):
    flows = {f["name"]: f for f in client.get("/v1/jobs/flows").json()}
    assert flows["quantize_tune"]["required_params"] == ["quantization_recipe", "num_trials"]
    assert "quantization" in flows


def test_validate(client, tiny_job):
    resp = client.post("/v1/jobs/validate", json=tiny_job)
    assert resp.status_code == 200
    assert resp.json() == {
        "valid": True,
        "name": "tiny-quantize-tune",
        "flow": "quantize_tune",
        "required_params": ["quantization_recipe", "num_trials"],
    }


def test_validate_reports_missing_fields(client, tiny_job):
    job = copy.deepcopy(tiny_job)
    del job["flow_params"]["num_trials"]
    resp = client.post("/v1/jobs/validate", json=job)
    assert resp.status_code == 422
    assert resp.json()["detail"]["fields"] == ["flow_params.num_trials"]


def test_validate_unknown_flow_and_bad_documents(client, tiny_job):
    job = dict(tiny_job, flow="distill")
    assert client.post("/v1/jobs/validate", json=job).status_code == 404
    assert client.post("/v1/jobs/validate", content=b"[1, 2]").status_code == 400
    assert client.post("/v1/jobs/validate", content=b"{oops").status_code == 400

    resp = client.post("/v1/jobs/validate", files={"other": ("a.txt", b"x", "text/plain")})
    assert resp.status_code == 422


def test_submit_json(client, flow_ctx, tiny_job):
    resp = client.post("/v1/jobs", json=tiny_job)
    assert resp.status_code == 200
    body = resp.json()
    assert body["status"] == "SUCCEEDED"
    assert body["archive"] == "tiny-quantize-tune.jsonl"
    assert (flow_ctx.archive_dir / body["archive"]).exists()
    assert [s["stage"] for s in body["stages"]][-1] == "persist"
    assert body["q_star"]["recipe"] == "tiny_w8a8"
    assert "fitness" in body["c_star"]


def test_submit_yaml_upload(client, tiny_job):
    job = copy.deepcopy(tiny_job)
    job["flow"] = "quantization"
    for key in ("load_pattern", "sweep", "tuner"):
        job["flow_params"].pop(key)
    text = yaml.safe_dump(job)
    resp = client.post("/v1/jobs", files={"file": ("job.yaml", text, "application/x-yaml")})
    assert resp.status_code == 200
    assert resp.json()["flow"] == "quantization"
    assert resp.json()["c_star"] is None


def test_failed_flow_still_answers_200(client, tiny_job):
    tiny_job["flow_params"]["min_score"] = 2.0
    resp = client.post("/v1/jobs", json=tiny_job)
    assert resp.status_code == 200
    assert resp.json()["status"] == "FAILED"
    assert resp.json()["failure_reason"]


def test_submit_rejects_invalid_jobs(client, tiny_job):
    tiny_job["resources"] = 0
    resp = client.post("/v1/jobs", json=tiny_job)
    assert resp.status_code == 422
    assert resp.json()["detail"]["fields"] == ["resources"]


SWEEP_BODY = {
    "load_pattern": {"input_len": 32, "output_len": 4, "duration": 2},
    "sweep": {"initial_rate": 8, "budget": 3},
    "backend": "sim",
}


def test_benchmark_sweep(client):
    resp = client.post("/v1/benchmarks/sweep", json=SWEEP_BODY)
    assert resp.status_code == 200
    body = resp.json()
    assert body["status"] == "FEASIBLE"
    assert body["best_rate"] > 0
    assert len(body["trials"]) == 3
    assert all(t["record"] == "sweep_trial" for t in body["trials"])
    assert all("requests" not in t for t in body["trials"])


def test_benchmark_sweep_with_requests(client):
    resp = client.post("/v1/benchmarks/sweep", json={**SWEEP_BODY, "include_requests": True})
    assert all(t["requests"] for t in resp.json()["trials"])


def test_benchmark_sweep_rejects_bad_input(client):
    bad_slo = client.post("/v1/benchmarks/sweep", json={**SWEEP_BODY, "slos": ["e2e_latency:p97<=1s"]})
    assert bad_slo.status_code == 422
    bad_backend = client.post("/v1/benchmarks/sweep", json={**SWEEP_BODY, "backend": "grpc"})
    assert bad_backend.status_code == 422


def test_benchmark_tune(client):
    body = {
        **SWEEP_BODY,
        "tuner": {
            "n_trials": 2,
            "seed": 0,
            "max_num_seqs_range": [16, 64],
            "max_batched_tokens_range": [512, 1024],
        },
        "gpu_budget": 2,
    }
    resp = client.post("/v1/benchmarks/tune", json=body)
    assert resp.status_code == 200
    out = resp.json()
    assert len(out["trials"]) == 2
    assert out["best_config"]["tensor_parallel"] in (1, 2)
    assert out["best_fitness"] == max(t["fitness"] for t in out["trials"])
