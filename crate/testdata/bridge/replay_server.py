"""Stdio bridge that replays testdata/bridge/conversation.jsonl.

Each incoming batch (request lines ended by a blank line) must match the
next recorded batch byte for byte; the recorded responses are written back.
A mismatching line is answered with an error response instead.
"""

import json
import sys


def main(path):
    batches = []
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            turn = json.loads(raw)
            while len(batches) <= turn["batch"]:
                batches.append([])
            batches[turn["batch"]].append((turn["request"], turn["response"]))

    pending = []
    index = 0
    for raw in sys.stdin:
        line = raw.rstrip("\n")
        if line:
            pending.append(line)
            continue
        expected = batches[index] if index < len(batches) else []
        for i, got in enumerate(pending):
            if i < len(expected) and got == expected[i][0]:
                sys.stdout.write(expected[i][1] + "\n")
            else:
                try:
                    id_ = json.loads(got).get("id", "")
                except ValueError:
                    id_ = ""
                err = {"id": id_, "error": "request does not match the recorded conversation"}
                sys.stdout.write(json.dumps(err, separators=(",", ":")) + "\n")
        sys.stdout.flush()
        pending = []
        index += 1


if __name__ == "__main__":
    main(sys.argv[1])
