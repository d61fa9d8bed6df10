from __future__ import annotations

from dotenv import load_dotenv
from fastapi import FastAPI

from servetune_api.routes import benchmarks, jobs
from servetune_core.config import configure_logging

load_dotenv()
configure_logging()

app = FastAPI(title="servetune API")


@app.get("/health", tags=["system"])
async def health() -> dict:
    return {"status": "ok"}


app.include_router(jobs.router)
app.include_router(benchmarks.router)
