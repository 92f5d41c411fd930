"""Regenerates the World Bank API replay fixtures in this directory.

Pages follow the API v2 JSON layout (`[metadata, rows]`) and are stored
under the SHA-256 of the request URL, the same naming the client's cache
uses. `expected_panel.csv` is written independently of the client as the
oracle for the panel-reconstruction test.
"""

import hashlib
import json
import random
from pathlib import Path

BASE = "https://api.worldbank.org/v2"
HERE = Path(__file__).resolve().parent
COUNTRIES = {"KEN": ("KE", "Kenya"), "NGA": ("NG", "Nigeria"), "ZAF": ("ZA", "South Africa")}
INDICATORS = {
    "GDP": "NY.GDP.MKTP.CD",
    "Agriculture": "NV.AGR.TOTL.CD",
    "Industry": "NV.IND.TOTL.CD",
    "Services": "NV.SRV.TOTL.CD",
}
Y0, Y1 = 1991, 2020
# (country, sector, year) cells the API reports as null
NULLS = {("KEN", "GDP", 2005)} | {("NGA", "Industry", y) for y in range(1991, 1996)} | {
    ("ZAF", "Agriculture", 2020),
    ("ZAF", "Services", 1991),
}


def url(countries, indicator, y0, y1, page):
    u = f"{BASE}/country/{';'.join(countries)}/indicator/{indicator}?format=json&per_page=1000&date={y0}:{y1}"
    return u if page == 1 else u + f"&page={page}"


def write_page(u, body, index):
    name = hashlib.sha256(u.encode()).hexdigest() + ".json"
    (HERE / name).write_text(body)
    index.append(f"{name} {u}")


def row(iso3, iso2, cname, ind_id, year, value):
    return {
        "indicator": {"id": ind_id, "value": ind_id},
        "country": {"id": iso2, "value": cname},
        "countryiso3code": iso3,
        "date": str(year),
        "value": value,
        "unit": "",
        "obs_status": "",
        "decimal": 0,
    }


def main():
    rng = random.Random(20240501)
    index = []
    values = {}
    for c in COUNTRIES:
        gdp = rng.uniform(5e9, 1e11)
        shares = [rng.uniform(0.15, 0.4), rng.uniform(0.2, 0.35)]
        for y in range(Y0, Y1 + 1):
            gdp *= 1 + rng.uniform(-0.02, 0.08)
            ag, ind = shares[0] * (1 - 0.01 * (y - Y0)), shares[1]
            parts = {"GDP": gdp, "Agriculture": ag * gdp, "Industry": ind * gdp, "Services": (1 - ag - ind) * gdp}
            for s, v in parts.items():
                values[(c, s, y)] = round(v, 2)

    for sector, ind in INDICATORS.items():
        rows = []
        for c, (iso2, cname) in COUNTRIES.items():
            for y in range(Y1, Y0 - 1, -1):  # the API lists newest first
                v = None if (c, sector, y) in NULLS else values[(c, sector, y)]
                rows.append(row(c, iso2, cname, ind, y, v))
        meta = {"page": 1, "pages": 1, "per_page": 1000, "total": len(rows), "sourceid": "2", "lastupdated": "2024-05-01"}
        write_page(url(list(COUNTRIES), ind, Y0, Y1, 1), json.dumps([meta, rows]), index)

    # pagination fixture: 97 countries x 21 years = 2037 rows over 3 pages
    codes = [a + b + c for a in "ABC" for b in "ABCDEFGHIJKLMNOPQRSTUVWXYZ" for c in "XYZ"][:97]
    all_rows = [
        row(code, code[:2], code, "TEST.PAGED", y, None if (i + y) % 11 == 0 else float(i * 100 + y - 2000))
        for i, code in enumerate(codes)
        for y in range(2020, 1999, -1)
    ]
    assert len(all_rows) == 2037
    for p in (1, 2, 3):
        chunk = all_rows[(p - 1) * 1000 : p * 1000]
        meta = {"page": p, "pages": 3, "per_page": "1000", "total": 2037}
        write_page(url(codes, "TEST.PAGED", 2000, 2020, p), json.dumps([meta, chunk]), index)
    (HERE / "paged_countries.txt").write_text("\n".join(codes) + "\n")

    # unknown-country response as the API returns it
    bad = [{"message": [{"id": "120", "key": "Invalid value", "value": "The provided parameter value is not valid"}]}]
    write_page(url(["XXX"], INDICATORS["GDP"], Y0, Y1, 1), json.dumps(bad), index)

    (HERE / "index.txt").write_text("\n".join(index) + "\n")

    sector_order = ["Agriculture", "Industry", "Services", "GDP"]
    lines = ["entity," + ",".join(str(y) for y in range(Y0, Y1 + 1))]
    for c in sorted(COUNTRIES):
        for s in sector_order:
            cells = ["" if (c, s, y) in NULLS else repr(values[(c, s, y)]) for y in range(Y0, Y1 + 1)]
            lines.append(f"{c}:{s}," + ",".join(cells))
    (HERE / "expected_panel.csv").write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
