#!/usr/bin/env python3
"""Protocol round trip against a live `simworld serve`: register, observe, act, plan, step."""
import json
import socket
import subprocess
import sys
import tempfile
import os


def main(cli):
    with tempfile.TemporaryDirectory() as tmp:
        city = os.path.join(tmp, "city.json")
        subprocess.run([cli, "gen", "--seed", "3", "--size", "300x300", "--out", city], check=True,
                       stdout=subprocess.DEVNULL)
        srv = subprocess.Popen([cli, "serve", "--map", city, "--port", "0"], stdout=subprocess.PIPE, text=True)
        try:
            banner = srv.stdout.readline().strip()
            port = int(banner.rsplit(":", 1)[1])
            sock = socket.create_connection(("127.0.0.1", port), timeout=20)
            stream = sock.makefile("rw", encoding="utf-8", newline="\n")
            next_id = [0]

            def call(cmd, **args):
                next_id[0] += 1
                stream.write(json.dumps({"id": next_id[0], "cmd": cmd, "args": args}) + "\n")
                stream.flush()
                resp = json.loads(stream.readline())
                assert resp["id"] == next_id[0], resp
                return resp

            info = call("world.info")
            assert info["status"] == "ok" and len(info["data"]["extent"]) == 4, info
            reg = call("agent.register", spawn=[info["data"]["extent"][2] / 2, info["data"]["extent"][3] / 2, 0])
            if reg["status"] != "ok":  # centre may be inside a building; fall back to a waypoint spawn
                reg = call("agent.register", spawn_waypoint=0)
            assert reg["status"] == "ok", reg
            aid = reg["data"]["id"]
            obs = call("agent.observe", id=aid, raster=True)
            assert obs["status"] == "ok" and obs["data"]["raster"]["encoding"] == "base64", obs
            act = call("agent.act", id=aid, action={"verb": "rotate", "args": {"theta": 0.5}})
            assert act["status"] == "ok" and act["data"]["tick"] == 1, act
            plan = call("agent.plan", id=aid, text="turn left, then step forward")
            assert plan["status"] == "ok", plan
            step = call("sim.step", n=20)
            assert step["status"] == "ok" and step["data"]["tick"] == 21, step
            bad = call("no.such.command")
            assert bad["status"] == "error" and bad["error"]["code"] == "UnknownCommand", bad
            stream.write("this is not json\n")
            stream.flush()
            garbage = json.loads(stream.readline())
            assert garbage["id"] == 0 and garbage["status"] == "error", garbage
            sock.close()
        finally:
            srv.terminate()
            rc = srv.wait(timeout=20)
        assert rc == 0, f"server exited with {rc}"
    print("protocol smoke test passed")


if __name__ == "__main__":
    main(sys.argv[1])
