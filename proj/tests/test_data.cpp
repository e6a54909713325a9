#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <set>
#include <sstream>
#include <vector>

#include "mpm/data.hpp"

using namespace mpm;

namespace {

std::vector<InteractionEvent> make_user_events(const std::string& user, const std::vector<int>& items,
                                               int64_t ts_base = 0) {
    std::vector<InteractionEvent> ev;
    for (size_t i = 0; i < items.size(); ++i)
        ev.push_back({user, "i" + std::to_string(items[i]), ts_base + static_cast<int64_t>(i)});
    return ev;
}

void append(std::vector<InteractionEvent>& into, const std::vector<InteractionEvent>& more) {
    into.insert(into.end(), more.begin(), more.end());
}

}  // namespace

// ---------------------------------------------------------------------------
// ingest_events
// ---------------------------------------------------------------------------

TEST_CASE("ingest: parses the MovieLens double-colon layout") {
    std::istringstream in("1::31::2.5::1260759144\n");
    auto res = ingest_events(in, LogFormat::named("ml"));
    REQUIRE(res.events.size() == 1);
    REQUIRE(res.events[0].user_key == "1");
    REQUIRE(res.events[0].item_key == "31");
    REQUIRE(res.events[0].timestamp == 1260759144);
    REQUIRE(res.malformed == 0);
}

TEST_CASE("ingest: empty stream gives an empty list") {
    std::istringstream in("");
    auto res = ingest_events(in, LogFormat::named("ml"));
    REQUIRE(res.events.empty());
    REQUIRE(res.malformed == 0);
}

TEST_CASE("ingest: short lines are skipped and counted") {
    std::istringstream in("1::31::3.0::100\n7::9\n2::40::1.0::200\n");
    auto res = ingest_events(in, LogFormat::named("ml"));
    REQUIRE(res.events.size() == 2);
    REQUIRE(res.malformed == 1);
}

TEST_CASE("ingest: negative or non-numeric timestamps are malformed") {
    std::istringstream in("1::31::3.0::-5\n1::32::3.0::abc\n1::33::3.0::77\n1::34::3.0::88\n1::35::1.0::99\n");
    auto res = ingest_events(in, LogFormat::named("ml"));
    REQUIRE(res.events.size() == 3);
    REQUIRE(res.malformed == 2);
}

TEST_CASE("ingest: mostly-malformed input is a format error") {
    std::istringstream in("a,b,c\nx,y\n1::2::3::4\n");
    REQUIRE_THROWS_AS(ingest_events(in, LogFormat::named("ml")), FormatError);
}

TEST_CASE("ingest: input order is preserved") {
    std::istringstream in("5::1::1::300\n5::2::1::100\n5::3::1::200\n");
    auto res = ingest_events(in, LogFormat::named("ml"));
    REQUIRE(res.events[0].item_key == "1");
    REQUIRE(res.events[1].item_key == "2");
    REQUIRE(res.events[2].item_key == "3");
}

// ---------------------------------------------------------------------------
// encode_and_filter
// ---------------------------------------------------------------------------

TEST_CASE("encode: a user with 19 events is dropped at threshold 20, 20 is kept") {
    std::vector<InteractionEvent> ev;
    std::vector<int> items19, items20;
    for (int i = 0; i < 19; ++i) items19.push_back(i);
    for (int i = 0; i < 20; ++i) items20.push_back(100 + i);
    append(ev, make_user_events("few", items19));
    append(ev, make_user_events("enough", items20));
    auto ds = encode_and_filter(ev, 20);
    REQUIRE(ds.num_users == 1);
    REQUIRE(ds.user_keys[0] == "enough");
    REQUIRE(ds.user_items[0].size() == 20);
}

TEST_CASE("encode: two disjoint 25-event users keep their lists with dense ids") {
    std::vector<InteractionEvent> ev;
    std::vector<int> a, b;
    for (int i = 0; i < 25; ++i) a.push_back(i);
    for (int i = 0; i < 25; ++i) b.push_back(1000 + i);
    append(ev, make_user_events("alpha", a));
    append(ev, make_user_events("beta", b));
    auto ds = encode_and_filter(ev, 20);
    REQUIRE(ds.num_users == 2);
    REQUIRE(ds.num_items == 50);
    REQUIRE(ds.user_items[0].size() == 25);
    REQUIRE(ds.user_items[1].size() == 25);
    std::set<int32_t> all;
    for (const auto& lst : ds.user_items) all.insert(lst.begin(), lst.end());
    REQUIRE(all.size() == 50);
    REQUIRE(*all.begin() == 0);
    REQUIRE(*all.rbegin() == 49);
}

TEST_CASE("encode: zero surviving users is an empty-dataset error") {
    auto ev = make_user_events("tiny", {1, 2, 3});
    REQUIRE_THROWS_AS(encode_and_filter(ev, 20), EmptyDatasetError);
}

TEST_CASE("encode: lists sorted by timestamp with input order as tiebreak") {
    std::vector<InteractionEvent> ev;
    for (int i = 0; i < 20; ++i) ev.push_back({"u", "i" + std::to_string(i), 50});  // all tied
    ev.push_back({"u", "early", 10});
    auto ds = encode_and_filter(ev, 20);
    REQUIRE(ds.item_keys[static_cast<size_t>(ds.user_items[0][0])] == "early");
    for (int i = 0; i < 20; ++i)
        REQUIRE(ds.item_keys[static_cast<size_t>(ds.user_items[0][static_cast<size_t>(i) + 1])] ==
                "i" + std::to_string(i));
}

TEST_CASE("encode: raising the threshold never increases the user count") {
    std::vector<InteractionEvent> ev;
    SplitRng rng(3);
    for (int u = 0; u < 8; ++u) {
        std::vector<int> items;
        const int n = 15 + static_cast<int>(rng.below(20));
        for (int i = 0; i < n; ++i) items.push_back(static_cast<int>(rng.below(60)));
        append(ev, make_user_events("u" + std::to_string(u), items));
    }
    size_t prev = SIZE_MAX;
    for (size_t thr : {10u, 15u, 20u, 25u, 30u}) {
        size_t count = 0;
        try {
            count = encode_and_filter(ev, thr).num_users;
        } catch (const EmptyDatasetError&) {
            count = 0;
        }
        REQUIRE(count <= prev);
        prev = count;
    }
}

// ---------------------------------------------------------------------------
// leave_one_out_split
// ---------------------------------------------------------------------------

namespace {

// A 22-item user plus filler users that widen the item universe enough to
// leave every user at least 99 unobserved items.
EncodedDataset split_fixture() {
    std::vector<InteractionEvent> ev;
    std::vector<int> a;
    for (int i = 0; i < 22; ++i) a.push_back(i);
    append(ev, make_user_events("alice", a));
    for (int f = 0; f < 5; ++f) {
        std::vector<int> items;
        for (int i = 0; i < 25; ++i) items.push_back(22 + f * 25 + i);
        append(ev, make_user_events("filler" + std::to_string(f), items));
    }
    return encode_and_filter(ev, 20);  // 147 items total
}

}  // namespace

TEST_CASE("split: 22-item list becomes 20 train + val + test in order") {
    auto ds = split_fixture();
    auto split = leave_one_out_split(ds, 99, 7);
    REQUIRE(split.train[0].size() == 20);
    REQUIRE(split.val_item[0] == ds.user_items[0][20]);
    REQUIRE(split.test_item[0] == ds.user_items[0][21]);
}

TEST_CASE("split: partition reproduces the encoded list exactly") {
    auto ds = split_fixture();
    auto split = leave_one_out_split(ds, 99, 7);
    for (size_t u = 0; u < ds.num_users; ++u) {
        std::vector<int32_t> rebuilt = split.train[u];
        rebuilt.push_back(split.val_item[u]);
        rebuilt.push_back(split.test_item[u]);
        REQUIRE(rebuilt == ds.user_items[u]);
    }
}

TEST_CASE("split: negatives are never observed items, for both holdouts") {
    auto ds = split_fixture();
    auto split = leave_one_out_split(ds, 99, 7);
    for (size_t u = 0; u < ds.num_users; ++u) {
        std::set<int32_t> seen(ds.user_items[u].begin(), ds.user_items[u].end());
        REQUIRE(split.val_negatives[u].size() == 99);
        REQUIRE(split.test_negatives[u].size() == 99);
        for (int32_t n : split.val_negatives[u]) REQUIRE(seen.count(n) == 0);
        for (int32_t n : split.test_negatives[u]) REQUIRE(seen.count(n) == 0);
    }
}

TEST_CASE("split: fixed seed reproduces identical negative sets") {
    auto ds = split_fixture();
    auto s1 = leave_one_out_split(ds, 99, 42);
    auto s2 = leave_one_out_split(ds, 99, 42);
    auto s3 = leave_one_out_split(ds, 99, 43);
    REQUIRE(s1.val_negatives == s2.val_negatives);
    REQUIRE(s1.test_negatives == s2.test_negatives);
    REQUIRE(s1.val_negatives != s3.val_negatives);
}

TEST_CASE("split: a user with exactly 99 unobserved items gets the whole complement") {
    // one user interacting with items 0..98 of a 198-item universe
    std::vector<InteractionEvent> ev;
    std::vector<int> a;
    for (int i = 0; i < 99; ++i) a.push_back(i);
    std::vector<int> b;
    for (int i = 99; i < 198; ++i) b.push_back(i);
    append(ev, make_user_events("narrow", a));
    append(ev, make_user_events("wide", b));
    auto ds = encode_and_filter(ev, 20);
    auto split = leave_one_out_split(ds, 99, 5);
    std::set<int32_t> negs(split.test_negatives[0].begin(), split.test_negatives[0].end());
    REQUIRE(negs.size() == 99);
    for (int32_t n : split.test_negatives[0]) REQUIRE(static_cast<size_t>(n) >= 99);
}

TEST_CASE("split: too few unobserved items is a sampling error naming the user") {
    std::vector<InteractionEvent> ev;
    std::vector<int> a;
    for (int i = 0; i < 30; ++i) a.push_back(i);
    append(ev, make_user_events("greedy", a));  // 30 items total, complement empty
    auto ds = encode_and_filter(ev, 20);
    REQUIRE_THROWS_WITH(leave_one_out_split(ds, 99, 1), Catch::Matchers::ContainsSubstring("greedy"));
}

TEST_CASE("split: lists shorter than 3 are rejected") {
    EncodedDataset ds;
    ds.num_users = 1;
    ds.num_items = 2;
    ds.user_items = {{0, 1}};
    ds.user_keys = {"u"};
    ds.item_keys = {"a", "b"};
    REQUIRE_THROWS_AS(leave_one_out_split(ds, 1, 0), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// build_training_examples
// ---------------------------------------------------------------------------

TEST_CASE("examples: 20 train items at K=9 give 11 positives and 44 negatives") {
    auto ds = split_fixture();
    auto split = leave_one_out_split(ds, 99, 7);
    auto epoch = build_training_examples(split, 9, 4, 123);
    size_t pos = 0, neg = 0;
    for (const auto& e : epoch.entries()) {
        if (e.user != 0) continue;
        e.label == 1.f ? ++pos : ++neg;
    }
    REQUIRE(pos == 11);
    REQUIRE(neg == 44);
}

TEST_CASE("examples: K=1 yields a positive for every position but the first") {
    auto ds = split_fixture();
    auto split = leave_one_out_split(ds, 99, 7);
    auto epoch = build_training_examples(split, 1, 0, 123);
    size_t pos0 = 0;
    for (const auto& e : epoch.entries())
        if (e.user == 0 && e.label == 1.f) ++pos0;
    REQUIRE(pos0 == split.train[0].size() - 1);
}

TEST_CASE("examples: histories are the K items immediately preceding the target") {
    auto ds = split_fixture();
    auto split = leave_one_out_split(ds, 99, 7);
    const size_t K = 5;
    auto epoch = build_training_examples(split, K, 2, 9);
    REQUIRE(epoch.size() > 0);
    for (size_t i = 0; i < epoch.size(); ++i) {
        auto ex = epoch.materialize(i);
        const auto& r = epoch.entries()[i];
        const auto& list = split.train[static_cast<size_t>(ex.user)];
        REQUIRE(ex.history.size() == K);
        for (size_t j = 0; j < K; ++j)
            REQUIRE(ex.history[j] == list[static_cast<size_t>(r.window_end) - K + j]);
        if (ex.label == 1.f) REQUIRE(ex.target == list[static_cast<size_t>(r.window_end)]);
    }
}

TEST_CASE("examples: negative targets never appear in the user's full list") {
    auto ds = split_fixture();
    auto split = leave_one_out_split(ds, 99, 7);
    auto epoch = build_training_examples(split, 9, 4, 321);
    for (size_t i = 0; i < epoch.size(); ++i) {
        auto ex = epoch.materialize(i);
        if (ex.label == 0.f) {
            const auto& full = ds.user_items[static_cast<size_t>(ex.user)];
            REQUIRE(std::find(full.begin(), full.end(), ex.target) == full.end());
        }
    }
}

TEST_CASE("examples: same seed, same stream; new seed resamples negatives") {
    auto ds = split_fixture();
    auto split = leave_one_out_split(ds, 99, 7);
    auto e1 = build_training_examples(split, 9, 4, 1000);
    auto e2 = build_training_examples(split, 9, 4, 1000);
    auto e3 = build_training_examples(split, 9, 4, 1001);
    REQUIRE(e1.size() == e2.size());
    bool any_diff = false;
    for (size_t i = 0; i < e1.size(); ++i) {
        REQUIRE(e1.entries()[i].target == e2.entries()[i].target);
        if (e1.entries()[i].target != e3.entries()[i].target) any_diff = true;
    }
    REQUIRE(any_diff);
}

// ---------------------------------------------------------------------------
// generate_synthetic
// ---------------------------------------------------------------------------

TEST_CASE("synthetic: zero noise keeps every event genuine and in-cluster") {
    SyntheticSpec spec{20, 100, 5, 25, 0.0, 11};
    auto data = generate_synthetic(spec);
    REQUIRE(data.events.size() == 20 * 25);
    for (uint8_t f : data.unexpected) REQUIRE(f == 0);
    // All of one user's items must land in a single 20-item cluster block.
    for (size_t u = 0; u < spec.num_users; ++u) {
        std::set<size_t> clusters;
        for (size_t i = 0; i < spec.interactions_per_user; ++i) {
            const auto& key = data.events[u * spec.interactions_per_user + i].item_key;
            clusters.insert(std::stoul(key.substr(1)) / 20);
        }
        REQUIRE(clusters.size() == 1);
    }
}

TEST_CASE("synthetic: noise fraction concentrates near the requested rate") {
    SyntheticSpec spec{400, 100, 5, 25, 0.3, 22};  // 10000 events
    auto data = generate_synthetic(spec);
    size_t noisy = 0;
    for (uint8_t f : data.unexpected) noisy += f;
    const double frac = static_cast<double>(noisy) / static_cast<double>(data.events.size());
    REQUIRE(frac > 0.28);
    REQUIRE(frac < 0.32);
}

TEST_CASE("synthetic: unexpected events land outside the preferred cluster") {
    SyntheticSpec spec{50, 100, 5, 30, 0.4, 33};
    auto data = generate_synthetic(spec);
    for (size_t u = 0; u < spec.num_users; ++u) {
        std::map<size_t, size_t> counts;
        for (size_t i = 0; i < spec.interactions_per_user; ++i) {
            const auto& key = data.events[u * spec.interactions_per_user + i].item_key;
            counts[std::stoul(key.substr(1)) / 20]++;
        }
        size_t preferred = 0, best = 0;
        for (auto [c, n] : counts)
            if (n > best) {
                best = n;
                preferred = c;
            }
        for (size_t i = 0; i < spec.interactions_per_user; ++i) {
            const size_t idx = u * spec.interactions_per_user + i;
            const size_t c = std::stoul(data.events[idx].item_key.substr(1)) / 20;
            if (data.unexpected[idx]) REQUIRE(c != preferred);
        }
    }
}

TEST_CASE("synthetic: fixed seed is bitwise reproducible") {
    SyntheticSpec spec{30, 60, 3, 22, 0.2, 44};
    auto a = generate_synthetic(spec);
    auto b = generate_synthetic(spec);
    REQUIRE(a.events.size() == b.events.size());
    for (size_t i = 0; i < a.events.size(); ++i) {
        REQUIRE(a.events[i].user_key == b.events[i].user_key);
        REQUIRE(a.events[i].item_key == b.events[i].item_key);
        REQUIRE(a.events[i].timestamp == b.events[i].timestamp);
    }
    REQUIRE(a.unexpected == b.unexpected);
}

TEST_CASE("synthetic: timestamps strictly increase within a user") {
    SyntheticSpec spec{10, 50, 2, 21, 0.1, 55};
    auto data = generate_synthetic(spec);
    for (size_t u = 0; u < spec.num_users; ++u)
        for (size_t i = 1; i < spec.interactions_per_user; ++i)
            REQUIRE(data.events[u * spec.interactions_per_user + i].timestamp >
                    data.events[u * spec.interactions_per_user + i - 1].timestamp);
}

TEST_CASE("synthetic: invalid specs are rejected") {
    REQUIRE_THROWS_AS(generate_synthetic({10, 50, 2, 19, 0.0, 1}), std::invalid_argument);
    REQUIRE_THROWS_AS(generate_synthetic({10, 50, 2, 25, 1.0, 1}), std::invalid_argument);
    REQUIRE_THROWS_AS(generate_synthetic({10, 50, 1, 25, 0.5, 1}), std::invalid_argument);
    REQUIRE_THROWS_AS(generate_synthetic({10, 5, 6, 25, 0.0, 1}), std::invalid_argument);
}

TEST_CASE("synthetic data round-trips the full pipeline") {
    SyntheticSpec spec{40, 80, 4, 24, 0.25, 66};
    auto data = generate_synthetic(spec);
    auto ds = encode_and_filter(data.events, 20);
    REQUIRE(ds.num_users == 40);  // everyone survives the filter
    auto split = leave_one_out_split(ds, 30, 9);
    REQUIRE(split.train[0].size() == 22);
}
