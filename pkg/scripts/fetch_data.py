"""Populate ``data/`` with the benchmark datasets that are redistributed on PyPI.

MUTAG ships (TU format) inside the grakel wheel's test fixtures and Cora ships
(raw ``cora.content`` / ``cora.cites``) inside the pgl wheel.  Only the
package index is needed, no direct dataset hosts.

    python scripts/fetch_data.py [--out data]

Cora is converted into the portable ``nodes.tsv`` / ``edges.tsv`` layout read
by :func:`quatgraph.datasets.load_citation`.  Other TU datasets (PTC_MR,
PROTEINS, ...) must be placed under ``data/<NAME>/`` by hand.
"""

from __future__ import annotations

import argparse
import io
import re
import urllib.parse
import urllib.request
import zipfile
from pathlib import Path

INDEX = "https://pypi.org"

SOURCES = {
    "MUTAG": ("grakel", "0.1.11", "grakel/tests/data/MUTAG/"),
    "cora": ("pgl", "2.2.6", "pgl/data/cora/"),
}


def _fetch_wheel(name: str, version: str) -> zipfile.ZipFile:
    base = f"{INDEX}/simple/{name}/"
    html = urllib.request.urlopen(base, timeout=60).read().decode()
    links = re.findall(r'href="([^"#]+\.whl)[^"]*"', html)
    links = [u for u in links if f"-{version}-" in u]
    if not links:
        raise SystemExit(f"no {name}=={version} wheel on {INDEX}")
    url = urllib.parse.urljoin(base, links[0])
    print(f"downloading {url.rsplit('/', 1)[-1]}")
    return zipfile.ZipFile(io.BytesIO(urllib.request.urlopen(url, timeout=600).read()))


def fetch_mutag(out: Path) -> None:
    name, version, prefix = SOURCES["MUTAG"]
    wheel = _fetch_wheel(name, version)
    dest = out / "MUTAG"
    dest.mkdir(parents=True, exist_ok=True)
    for info in wheel.infolist():
        if info.filename.startswith(prefix) and not info.filename.endswith("/"):
            (dest / Path(info.filename).name).write_bytes(wheel.read(info))
    print(f"wrote {dest}")


def convert_cora(content: str, cites: str, dest: Path) -> None:
    rows = [line.split("\t") for line in content.splitlines() if line.strip()]
    num_features = len(rows[0]) - 2
    dest.mkdir(parents=True, exist_ok=True)
    with open(dest / "nodes.tsv", "w") as fh:
        fh.write(f"# num_features={num_features}\n")
        for row in rows:
            node_id, label = row[0], row[-1]
            feats = " ".join(f"{j}:{v}" for j, v in enumerate(row[1:-1]) if float(v) != 0.0)
            fh.write(f"{node_id}\t{label}\t{feats}\n")
    with open(dest / "edges.tsv", "w") as fh:
        for line in cites.splitlines():
            if line.strip():
                cited, citing = line.split()
                fh.write(f"{citing}\t{cited}\n")
    print(f"wrote {dest}")


def fetch_cora(out: Path) -> None:
    name, version, prefix = SOURCES["cora"]
    wheel = _fetch_wheel(name, version)
    content = wheel.read(prefix + "cora.content").decode()
    cites = wheel.read(prefix + "cora.cites").decode()
    convert_cora(content, cites, out / "cora")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data"))
    args = parser.parse_args()
    out = Path(args.out)
    fetch_mutag(out)
    fetch_cora(out)


if __name__ == "__main__":
    main()
