import random

import pytest

from conftest import random_dag
from xcache.addressing import XidType, make_fallback_dag, symbolic_xid
from xcache.urls import (
    NcidUrl,
    UrlParseError,
    canonical_name,
    parse_dag_url,
    parse_ncid_url,
    pct_decode,
    pct_encode,
    serialize_dag_url,
    serialize_ncid_url,
)

C = symbolic_xid(XidType.CID, "C")
B = symbolic_xid(XidType.AD, "B")
P = symbolic_xid(XidType.HID, "P")
S = symbolic_xid(XidType.SID, "S")

FALLBACK_URL = "cid://2,0/AD-B,1/HID-P,2/CID-C"


class TestDagUrlSerialize:
    def test_fallback_example_exact(self):
        dag = make_fallback_dag(C, [B, P])
        assert serialize_dag_url(dag, short=True) == FALLBACK_URL

    def test_single_node(self):
        assert serialize_dag_url(make_fallback_dag(C, []), short=True) == "cid://0/CID-C"

    def test_service_intent(self):
        dag = make_fallback_dag(S, [B, P])
        assert serialize_dag_url(dag, short=True) == "sid://2,0/AD-B,1/HID-P,2/SID-S"

    def test_scheme_follows_intent_type(self):
        rng = random.Random(3)
        for xtype in XidType:
            dag = random_dag(rng, intent_type=xtype)
            assert serialize_dag_url(dag).startswith(xtype.scheme + "://")


class TestDagUrlParse:
    def test_fallback_example(self):
        assert parse_dag_url(FALLBACK_URL, allow_short=True) == make_fallback_dag(C, [B, P])

    def test_single_node(self):
        assert parse_dag_url("cid://0/CID-C", allow_short=True) == make_fallback_dag(C, [])

    def test_cycle_reported_with_position(self):
        with pytest.raises(UrlParseError) as info:
            parse_dag_url("cid://2,0/AD-B,1/HID-P,0/CID-C", allow_short=True)
        assert info.value.kind == "cycle"
        assert info.value.position > 0

    def test_edge_out_of_range(self):
        with pytest.raises(UrlParseError) as info:
            parse_dag_url("cid://9/CID-C", allow_short=True)
        assert info.value.kind == "edge-range"

    def test_unknown_scheme(self):
        with pytest.raises(UrlParseError) as info:
            parse_dag_url("zid://0/CID-C", allow_short=True)
        assert info.value.kind == "scheme"
        assert info.value.position == 0

    def test_scheme_intent_mismatch(self):
        with pytest.raises(UrlParseError) as info:
            parse_dag_url("sid://0/CID-C", allow_short=True)
        assert info.value.kind == "intent-mismatch"

    def test_malformed_segment(self):
        with pytest.raises(UrlParseError) as info:
            parse_dag_url("cid://x/CID-C", allow_short=True)
        assert info.value.kind == "malformed"

    def test_strict_mode_rejects_short_xids(self):
        with pytest.raises(UrlParseError):
            parse_dag_url(FALLBACK_URL)

    def test_node_count_limit(self):
        n = 20
        segments = [",".join(str(i) for i in range(n))]
        for i in range(n):
            edges = [str(i + 1)] if i + 1 < n else []
            segments.append(",".join([f"CID-n{i}"] + edges))
        with pytest.raises(UrlParseError) as info:
            parse_dag_url("cid://" + "/".join(segments), allow_short=True)
        assert info.value.kind == "invalid"

    def test_cycle_detector_against_oracle_on_small_graphs(self):
        # every 3-node edge combination, cyclic or not, expressed as URL
        # text; the parser must flag exactly the cyclic ones
        def subsets(items):
            out = [()]
            for r in range(1, len(items) + 1):
                from itertools import combinations

                out.extend(combinations(items, r))
            return out

        def oracle_cyclic(edge_lists):
            WHITE, GREY, BLACK = 0, 1, 2
            color = [WHITE] * len(edge_lists)

            def visit(i):
                color[i] = GREY
                for t in edge_lists[i]:
                    if color[t] == GREY or (color[t] == WHITE and visit(t)):
                        return True
                color[i] = BLACK
                return False

            return any(visit(i) for i in range(len(edge_lists)) if color[i] == WHITE)

        n = 3
        from itertools import product

        cyclic_seen = acyclic_seen = 0
        for edge_lists in product(subsets(range(n)), repeat=n):
            segments = ["cid://" + ",".join(str(i) for i in range(n))]
            for i, edges in enumerate(edge_lists):
                segments.append(",".join([f"CID-n{i}"] + [str(t) for t in edges]))
            url = "/".join(segments)
            try:
                parse_dag_url(url, allow_short=True)
                outcome = "ok"
            except UrlParseError as exc:
                outcome = exc.kind
            if oracle_cyclic(edge_lists):
                assert outcome == "cycle", url
                cyclic_seen += 1
            else:
                assert outcome != "cycle", url
                acyclic_seen += 1
        assert cyclic_seen > 400 and acyclic_seen > 20


class TestDagUrlRoundTrip:
    def test_thousand_random_dags_reserialize_identically(self):
        rng = random.Random(1234)
        types = list(XidType)
        for i in range(1000):
            dag = random_dag(rng, max_nodes=8, intent_type=types[i % len(types)])
            url = serialize_dag_url(dag)
            parsed = parse_dag_url(url)
            assert serialize_dag_url(parsed) == url

    def test_parse_of_serialize_is_structurally_equal(self):
        rng = random.Random(77)
        for _ in range(200):
            dag = random_dag(rng, max_nodes=8)
            parsed = parse_dag_url(serialize_dag_url(dag))
            assert serialize_dag_url(parsed) == serialize_dag_url(dag)
            assert sorted(x.value for x in parsed.xids()) == sorted(
                x.value for x in dag.xids()
            )
            assert parsed.intent_xid() == dag.intent_xid()

    def test_parse_never_panics_on_arbitrary_input(self):
        rng = random.Random(42)
        candidates = []
        for _ in range(400):
            length = rng.randint(0, 60)
            candidates.append(
                "".join(chr(rng.randint(1, 0x7F)) for _ in range(length))
            )
        base = FALLBACK_URL
        for _ in range(400):
            pos = rng.randrange(len(base))
            mutated = base[:pos] + chr(rng.randint(1, 0x7F)) + base[pos + 1 :]
            candidates.append(mutated)
        for text in candidates:
            try:
                parse_dag_url(text, allow_short=True)
            except UrlParseError:
                pass


class TestNcidUrl:
    def test_useragent_example_exact(self):
        url = NcidUrl("content.facebook.com", (("UserAgent", "Android"),))
        assert serialize_ncid_url(url) == "ncid://content.facebook.com/UserAgent=Android"
        assert parse_ncid_url("ncid://content.facebook.com/UserAgent=Android") == url

    def test_empty_locator_set(self):
        assert serialize_ncid_url(NcidUrl("a")) == "ncid://a/"
        assert parse_ncid_url("ncid://a/") == NcidUrl("a")

    def test_reserved_characters_round_trip(self):
        url = NcidUrl("a&b/c", (("k=1", "v&w%"), ("other", "x#y")))
        assert parse_ncid_url(serialize_ncid_url(url)) == url

    def test_locator_order_preserved(self):
        url = NcidUrl("a", (("z", "1"), ("a", "2"), ("m", "3")))
        assert parse_ncid_url(serialize_ncid_url(url)).locators == url.locators

    def test_duplicate_locator_key_rejected(self):
        with pytest.raises(UrlParseError) as info:
            parse_ncid_url("ncid://a/k=1&k=2")
        assert info.value.kind == "duplicate-locator"

    def test_empty_address_rejected(self):
        with pytest.raises(UrlParseError) as info:
            parse_ncid_url("ncid:///k=1")
        assert info.value.kind == "empty-address"

    def test_bad_percent_escape(self):
        with pytest.raises(UrlParseError) as info:
            parse_ncid_url("ncid://a%2/k=1")
        assert info.value.kind == "escape"

    def test_missing_slash_after_address(self):
        with pytest.raises(UrlParseError) as info:
            parse_ncid_url("ncid://justaname")
        assert info.value.kind == "malformed"

    def test_pubcert_locator_must_be_a_dag_url(self):
        good = serialize_ncid_url(NcidUrl("a", (("PubCert", "cid://0/CID-C"),)))
        assert parse_ncid_url(good).locator("PubCert") == "cid://0/CID-C"
        with pytest.raises(UrlParseError):
            parse_ncid_url("ncid://a/PubCert=gibberish")

    def test_missing_pubcert_is_accepted_at_parse_time(self):
        parsed = parse_ncid_url("ncid://a/Version=7")
        assert parsed.locator("PubCert") is None

    def test_fuzz_round_trip_random_printable(self):
        rng = random.Random(9)
        for _ in range(300):
            addr = "".join(chr(rng.randint(0x20, 0x7E)) for _ in range(rng.randint(1, 12)))
            pairs = []
            used = set()
            for _ in range(rng.randint(0, 3)):
                key = "".join(chr(rng.randint(0x21, 0x7E)) for _ in range(rng.randint(1, 6)))
                if key in used or key == "PubCert":
                    continue
                used.add(key)
                value = "".join(chr(rng.randint(0x20, 0x7E)) for _ in range(rng.randint(0, 8)))
                pairs.append((key, value))
            url = NcidUrl(addr, tuple(pairs))
            assert parse_ncid_url(serialize_ncid_url(url)) == url

    def test_parse_never_panics(self):
        rng = random.Random(31)
        for _ in range(500):
            text = "ncid://" + "".join(
                chr(rng.randint(1, 0x7F)) for _ in range(rng.randint(0, 30))
            )
            try:
                parse_ncid_url(text)
            except UrlParseError:
                pass


class TestPctEncoding:
    def test_reserved_set(self):
        assert pct_encode("a/b&c=d%e#f") == "a%2fb%26c%3dd%25e%23f"

    def test_non_printable_and_unicode(self):
        assert pct_encode("\x01") == "%01"
        assert pct_decode(pct_encode("café ☃")) == "café ☃"

    def test_random_round_trip(self):
        rng = random.Random(8)
        for _ in range(500):
            text = "".join(chr(rng.randint(1, 0x2FF)) for _ in range(rng.randint(0, 20)))
            assert pct_decode(pct_encode(text)) == text


class TestCanonicalName:
    def test_address_alone(self):
        assert canonical_name("a.b") == "a.b"

    def test_locators_sorted_and_joined(self):
        assert (
            canonical_name("a", [("UserAgent", "Android"), ("Version", "2")])
            == "a?UserAgent=Android&Version=2"
        )
        assert canonical_name("a", [("Version", "2"), ("UserAgent", "Android")]) == (
            "a?UserAgent=Android&Version=2"
        )

    def test_pubcert_excluded(self):
        assert canonical_name("a", [("PubCert", "cid://0/CID-C")]) == "a"
