from services.log_persistence import LogStore, RunManifest


def _manifest(job_id="Job One-1"):
    return RunManifest(
        job_id=job_id, name="job one", state="Done", config_hash="ab" * 32,
        routing_mode="OTF", seed=3, vid_owner={"61": "h:1"}, apps={"61": {"replies": 2}}
    )


def test_router_logs_use_readable_names(tmp_path):
    store = LogStore(tmp_path)
    path = store.write_router_log("Job One-1", b"a", "t_us,event\n")
    assert path == tmp_path / "job-one-1" / "routers" / "a-61.csv"
    store.write_router_log("Job One-1", b"\xff", "t_us,event\n")
    assert [p.name for p in store.list_logs("Job One-1")] == ["a-61.csv", "ff-ff.csv"]


def test_manifest_round_trip_with_timestamps(tmp_path):
    store = LogStore(tmp_path)
    store.write_manifest(_manifest())
    loaded = store.read_manifest("Job One-1")
    assert loaded.apps == {"61": {"replies": 2}}
    assert loaded.created_at.endswith("+00:00")
    assert loaded.finished_at >= loaded.created_at
    assert store.list_jobs() == ["job-one-1"]


def test_empty_store(tmp_path):
    store = LogStore(tmp_path / "missing")
    assert store.list_jobs() == []
    assert store.list_logs("nothing") == []
