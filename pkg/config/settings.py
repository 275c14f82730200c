# Configurazioni base della piattaforma
APP_CONFIG = {
    # Topologia
    "topology": {
        "default_delay_ms": 0.0,
        "default_loss_rate": 0.0,
        "default_bandwidth_kbps": None,  # None = illimitata
        "default_queue_len": 1000,  # pacchetti per direzione
        "default_weight": 1.0,  # hop count
        "max_vid_len": 255,
        "connectivity_required": True
    },

    # Routing
    "routing": {
        "default_mode": "OTF",
        "float_tolerance": 1e-9
    },

    # SRouter e emulazione dei link
    "srouter": {
        "default_ttl": 64,
        "mtu": 1518,  # burst di default del token bucket, in byte
        "max_payload": 64 * 1024,
        "cqueue_len": 100000,
        "aggregate_ingress_kbps": None,  # limiti aggregati disattivati
        "aggregate_egress_kbps": None,
        "processing_delay_s": 0.0,  # costo per pacchetto nel tempo virtuale
        "timer_granularity_target_ms": 1.0,
        "connect_timeout_s": 5.0,
        "connect_retries": 20,
        "migration_settle_s": 0.02  # attesa oltre il ritardo dei link prima di fermare un router migrato
    },

    # Placement
    "placement": {
        "weights": (0.4, 0.3, 0.2, 0.1),
        "epsilon": 1e-3,
        "migration_threshold": 0.8,
        "migration_sustain_s": 5.0,
        "sample_interval_s": 1.0,
        "lex_tiebreak_max_vars": 2000,  # oltre, il tie-break lessicografico esatto e' saltato
        "milp_time_limit_s": None,
        "exact_repair_rounds": 16,
        "exact_repair_margin": 1e-6,  # relativo, sopra la tolleranza di HiGHS
        "migration_search_budget": 20000,  # combinazioni esaminate prima del piano greedy
        "default_requirement": {"cpu": 1.0, "mem": 16.0, "egress": 100.0, "ingress": 100.0}
    },

    # Agenti e controllo
    "agent": {
        "default_host": "127.0.0.1",
        "default_port": 7700,
        "router_port_base": 20000,
        "router_port_span": 10000,
        "heartbeat_interval_s": 1.0,
        "suspect_after_missed": 3,
        "election_timeout_s": 2.0,
        "election_backoff_s": (0.05, 0.5),
        "rpc_timeout_s": 5.0,
        "rpc_attempts": 3,
        "deploy_port_retries": 3,
        "deploy_timeout_s": 60.0,
        "status_poll_s": 0.5,
        "capacity": {"cpu": 100.0, "mem": 4096.0, "egress": 1000000.0, "ingress": 1000000.0, "slots": 512}
    },

    # Benchmark
    "bench": {
        "max_timer_granularity_ms": 2.0,
        "link_duration_s": 30.0,
        "ping_count": 2000,
        "loss_packets": 100000,
        "bandwidth_grid_kbps": [56, 384, 1544, 10000, 45000],
        "packet_sizes": [64, 1518],
        "delay_grid_ms": [0, 5, 10, 50, 300],
        "loss_grid_pct": [0.8, 2.5, 12.0],
        "bandwidth_tolerance_pct": 3.0
    }
}

# Messaggi di errore standard
ERROR_MESSAGES = {
    "duplicate_vid": "Duplicate VID",
    "dangling_endpoint": "Link endpoint is not a declared router",
    "duplicate_link": "More than one link for the same router pair",
    "disconnected": "Topology is disconnected",
    "unknown_vid": "Unknown VID",
    "not_neighbor": "Next hop is not a neighbor",
    "forwarding_loop": "Forwarding loop detected",
    "no_route": "No route to destination",
    "malformed_packet": "Malformed packet",
    "payload_too_large": "Payload exceeds maximum size",
    "unknown_handler": "Handler not found in registry",
    "bypass_protected": "The bypass handler must stay last in the chain",
    "infeasible": "No deployment satisfies the capacity constraints",
    "no_relief": "No move set relieves the overloaded node",
    "invalid_archive": "Invalid job archive",
    "agent_unreachable": "Agent unreachable",
    "port_conflict": "Port already in use",
    "invalid_transition": "Invalid job state transition",
    "invalid_peers": "Invalid peer list"
}

# Codici di uscita della CLI
EXIT_CODES = {
    "ok": 0,
    "usage": 2,
    "infeasible": 3,
    "runtime": 4
}
