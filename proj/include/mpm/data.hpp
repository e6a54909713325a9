#pragma once

#include <algorithm>
#include <cstdint>
#include <istream>
#include <string>
#include <unordered_map>
#include <vector>

#include "mpm/errors.hpp"
#include "mpm/rng.hpp"

namespace mpm {

struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};
struct EmptyDatasetError : std::runtime_error {
    explicit EmptyDatasetError(const std::string& msg) : std::runtime_error(msg) {}
};
struct SamplingError : std::runtime_error {
    explicit SamplingError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

struct InteractionEvent {
    std::string user_key;
    std::string item_key;
    int64_t timestamp = 0;
};

// Delimiter-separated log layout: which columns hold user, item, timestamp.
// Extra columns (ratings, behavior types) are ignored.
struct LogFormat {
    std::string delimiter = "::";
    size_t user_col = 0;
    size_t item_col = 1;
    size_t time_col = 3;

    size_t min_fields() const { return std::max({user_col, item_col, time_col}) + 1; }

    // Presets: ml (user::item::rating::ts), csv/tsv with the same column
    // layout, uit (user::item::ts, the layout cmd_synth writes).
    static LogFormat named(const std::string& name) {
        if (name == "ml") return {"::", 0, 1, 3};
        if (name == "csv") return {",", 0, 1, 3};
        if (name == "tsv") return {"\t", 0, 1, 3};
        if (name == "uit") return {"::", 0, 1, 2};
        throw std::invalid_argument("unknown log format '" + name + "' (expected ml, csv, tsv or uit)");
    }
};

struct IngestResult {
    std::vector<InteractionEvent> events;
    size_t malformed = 0;
};

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line, const std::string& delim) {
    std::vector<std::string> out;
    size_t pos = 0;
    while (true) {
        const size_t next = line.find(delim, pos);
        if (next == std::string::npos) {
            out.push_back(line.substr(pos));
            return out;
        }
        out.push_back(line.substr(pos, next - pos));
        pos = next + delim.size();
    }
}

inline bool parse_timestamp(const std::string& s, int64_t& out) {
    if (s.empty()) return false;
    size_t consumed = 0;
    try {
        out = std::stoll(s, &consumed);
    } catch (const std::exception&) {
        return false;
    }
    return consumed == s.size() && out >= 0;
}

}  // namespace detail

// One event per valid record, input order preserved; malformed lines counted.
// More than 50% malformed lines means the format descriptor is wrong.
inline IngestResult ingest_events(std::istream& in, const LogFormat& fmt) {
    if (!in.good() && !in.eof()) throw IoError("ingest_events: unreadable input stream");
    IngestResult result;
    std::string line;
    size_t considered = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        ++considered;
        auto fields = detail::split_fields(line, fmt.delimiter);
        int64_t ts = 0;
        if (fields.size() < fmt.min_fields() || fields[fmt.user_col].empty() || fields[fmt.item_col].empty() ||
            !detail::parse_timestamp(fields[fmt.time_col], ts)) {
            ++result.malformed;
            continue;
        }
        result.events.push_back({std::move(fields[fmt.user_col]), std::move(fields[fmt.item_col]), ts});
    }
    if (in.bad()) throw IoError("ingest_events: read failure on input stream");
    if (considered > 0 && result.malformed * 2 > considered)
        throw FormatError("ingest_events: " + std::to_string(result.malformed) + " of " + std::to_string(considered) +
                          " lines malformed; wrong format descriptor?");
    return result;
}

// ---------------------------------------------------------------------------
// Encoding and filtering
// ---------------------------------------------------------------------------

struct EncodedDataset {
    size_t num_users = 0;
    size_t num_items = 0;
    std::vector<std::vector<int32_t>> user_items;  // chronological per user
    std::vector<std::string> user_keys;
    std::vector<std::string> item_keys;

    size_t total_interactions() const {
        size_t n = 0;
        for (const auto& v : user_items) n += v.size();
        return n;
    }
};

// Drops users with fewer than min_interactions events (single pass; items are
// never filtered), densely re-indexes the survivors in first-appearance order
// and sorts each user's list by timestamp with input order as tiebreak.
inline EncodedDataset encode_and_filter(const std::vector<InteractionEvent>& events, size_t min_interactions = 20) {
    std::unordered_map<std::string, size_t> user_counts;
    for (const auto& e : events) ++user_counts[e.user_key];

    EncodedDataset ds;
    std::unordered_map<std::string, int32_t> user_ids, item_ids;
    std::vector<std::vector<std::pair<int64_t, int32_t>>> stamped;  // (timestamp, item)
    for (const auto& e : events) {
        if (user_counts.at(e.user_key) < min_interactions) continue;
        auto [uit, unew] = user_ids.try_emplace(e.user_key, static_cast<int32_t>(ds.user_keys.size()));
        if (unew) {
            ds.user_keys.push_back(e.user_key);
            stamped.emplace_back();
        }
        auto [iit, inew] = item_ids.try_emplace(e.item_key, static_cast<int32_t>(ds.item_keys.size()));
        if (inew) ds.item_keys.push_back(e.item_key);
        stamped[static_cast<size_t>(uit->second)].emplace_back(e.timestamp, iit->second);
    }
    if (ds.user_keys.empty())
        throw EmptyDatasetError("encode_and_filter: no user has at least " + std::to_string(min_interactions) +
                                " interactions");
    ds.num_users = ds.user_keys.size();
    ds.num_items = ds.item_keys.size();
    ds.user_items.resize(ds.num_users);
    for (size_t u = 0; u < ds.num_users; ++u) {
        auto& lst = stamped[u];
        std::stable_sort(lst.begin(), lst.end(),
                         [](const auto& a, const auto& b) { return a.first < b.first; });
        ds.user_items[u].reserve(lst.size());
        for (const auto& [ts, item] : lst) ds.user_items[u].push_back(item);
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Leave-one-out split
// ---------------------------------------------------------------------------

struct SplitDataset {
    size_t num_users = 0;
    size_t num_items = 0;
    std::vector<std::vector<int32_t>> train;            // all but the last two items
    std::vector<int32_t> val_item;                      // second-to-last
    std::vector<int32_t> test_item;                     // last
    std::vector<std::vector<int32_t>> val_negatives;    // eval_negatives unobserved items
    std::vector<std::vector<int32_t>> test_negatives;
    std::vector<std::vector<int32_t>> interacted;       // full list per user, sorted (for purity checks)
    size_t eval_negatives = 99;
    uint64_t seed = 0;

    size_t total_interactions() const {
        size_t n = 2 * num_users;
        for (const auto& v : train) n += v.size();
        return n;
    }

    bool user_interacted(size_t user, int32_t item) const {
        const auto& v = interacted[user];
        return std::binary_search(v.begin(), v.end(), item);
    }
};

namespace detail {

inline std::vector<int32_t> sample_unobserved(const std::vector<int32_t>& interacted_sorted, size_t num_items,
                                              size_t count, SplitRng& rng, size_t user, const std::string& user_key) {
    std::vector<int32_t> complement;
    complement.reserve(num_items - interacted_sorted.size());
    size_t k = 0;
    for (int32_t item = 0; item < static_cast<int32_t>(num_items); ++item) {
        while (k < interacted_sorted.size() && interacted_sorted[k] < item) ++k;
        if (k < interacted_sorted.size() && interacted_sorted[k] == item) continue;
        complement.push_back(item);
    }
    if (complement.size() < count)
        throw SamplingError("leave_one_out_split: user " + std::to_string(user) + " ('" + user_key + "') has only " +
                            std::to_string(complement.size()) + " unobserved items, needs " + std::to_string(count));
    // Partial Fisher-Yates: the first `count` slots end up a uniform sample
    // without replacement.
    for (size_t i = 0; i < count; ++i) {
        const size_t j = i + static_cast<size_t>(rng.below(complement.size() - i));
        std::swap(complement[i], complement[j]);
    }
    complement.resize(count);
    return complement;
}

}  // namespace detail

// Per user: test gets the last item, validation the second-to-last, train the
// rest. Negatives are drawn uniformly without replacement from the items the
// user never interacted with, independently for validation and test.
inline SplitDataset leave_one_out_split(const EncodedDataset& ds, size_t eval_negatives, uint64_t seed) {
    SplitDataset split;
    split.num_users = ds.num_users;
    split.num_items = ds.num_items;
    split.eval_negatives = eval_negatives;
    split.seed = seed;
    split.train.resize(ds.num_users);
    split.val_item.resize(ds.num_users);
    split.test_item.resize(ds.num_users);
    split.val_negatives.resize(ds.num_users);
    split.test_negatives.resize(ds.num_users);
    split.interacted.resize(ds.num_users);
    for (size_t u = 0; u < ds.num_users; ++u) {
        const auto& full = ds.user_items[u];
        if (full.size() < 3)
            throw std::invalid_argument("leave_one_out_split: user " + std::to_string(u) +
                                        " has fewer than 3 interactions");
        split.train[u].assign(full.begin(), full.end() - 2);
        split.val_item[u] = full[full.size() - 2];
        split.test_item[u] = full.back();

        auto& sorted = split.interacted[u];
        sorted = full;
        std::sort(sorted.begin(), sorted.end());
        sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());

        SplitRng val_rng(substream(seed, u, kTagValNeg));
        SplitRng test_rng(substream(seed, u, kTagTestNeg));
        split.val_negatives[u] =
            detail::sample_unobserved(sorted, ds.num_items, eval_negatives, val_rng, u, ds.user_keys[u]);
        split.test_negatives[u] =
            detail::sample_unobserved(sorted, ds.num_items, eval_negatives, test_rng, u, ds.user_keys[u]);
    }
    return split;
}

inline SplitDataset leave_one_out_split(const EncodedDataset& ds, uint64_t seed) {
    return leave_one_out_split(ds, 99, seed);
}

// ---------------------------------------------------------------------------
// Training examples
// ---------------------------------------------------------------------------

// The unit of pointwise training: K history items, one target, one label.
struct TrainingExample {
    int32_t user = 0;
    std::vector<int32_t> history;
    int32_t target = 0;
    float label = 0.f;
};

// One epoch's worth of examples in compact form. Histories are views into the
// split's train lists: entry (user, window_end) has history
// train[user][window_end-K .. window_end).
class EpochExamples {
   public:
    struct Ref {
        int32_t user;
        int32_t window_end;
        int32_t target;
        float label;
    };

    EpochExamples(const SplitDataset& split, size_t history_size) : split_(&split), K_(history_size) {}

    size_t size() const { return entries_.size(); }
    size_t history_size() const { return K_; }
    const std::vector<Ref>& entries() const { return entries_; }
    std::vector<Ref>& entries() { return entries_; }
    const SplitDataset& split() const { return *split_; }

    const int32_t* history_of(const Ref& r) const {
        return split_->train[static_cast<size_t>(r.user)].data() + r.window_end - static_cast<int32_t>(K_);
    }

    TrainingExample materialize(size_t i) const {
        const Ref& r = entries_[i];
        const int32_t* h = history_of(r);
        return {r.user, std::vector<int32_t>(h, h + K_), r.target, r.label};
    }

   private:
    const SplitDataset* split_;
    size_t K_;
    std::vector<Ref> entries_;
};

// For each user and each train position p >= K: one positive example plus
// train_negatives negatives sharing the history, targets drawn uniformly from
// the user's unobserved items (by rejection; duplicates across draws allowed).
// Positions with fewer than K preceding items are skipped. Call once per epoch
// with a fresh substream seed to resample the negatives.
inline EpochExamples build_training_examples(const SplitDataset& split, size_t history_size, size_t train_negatives,
                                             uint64_t sampling_seed) {
    if (history_size < 1) throw std::invalid_argument("build_training_examples: history size must be >= 1");
    EpochExamples out(split, history_size);
    const int32_t K = static_cast<int32_t>(history_size);
    for (size_t u = 0; u < split.num_users; ++u) {
        const auto& list = split.train[u];
        if (list.size() < history_size + 1) continue;
        if (split.interacted[u].size() >= split.num_items)
            throw SamplingError("build_training_examples: user " + std::to_string(u) + " has no unobserved items");
        SplitRng rng(substream(sampling_seed, u, kTagTrainNeg));
        for (int32_t p = K; p < static_cast<int32_t>(list.size()); ++p) {
            out.entries().push_back({static_cast<int32_t>(u), p, list[static_cast<size_t>(p)], 1.f});
            for (size_t j = 0; j < train_negatives; ++j) {
                int32_t neg;
                do {
                    neg = static_cast<int32_t>(rng.below(split.num_items));
                } while (split.user_interacted(u, neg));
                out.entries().push_back({static_cast<int32_t>(u), p, neg, 0.f});
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic data with planted unexpected behaviors
// ---------------------------------------------------------------------------

struct SyntheticSpec {
    size_t num_users = 100;
    size_t num_items = 100;
    size_t num_clusters = 5;
    size_t interactions_per_user = 20;
    double noise_rate = 0.0;  // probability an interaction is "unexpected"
    uint64_t seed = 0;
};

struct SyntheticData {
    std::vector<InteractionEvent> events;
    std::vector<uint8_t> unexpected;  // parallel to events; 1 = planted noise
};

// Items fall into num_clusters nearly-equal contiguous groups; every user has
// one preferred cluster and draws each interaction from it with probability
// 1-noise_rate, otherwise uniformly from one of the other clusters. Timestamps
// increase strictly within each user.
inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
    if (spec.interactions_per_user < 20)
        throw std::invalid_argument("generate_synthetic: interactions_per_user must be >= 20 so filtering keeps all users");
    if (spec.noise_rate < 0.0 || spec.noise_rate >= 1.0)
        throw std::invalid_argument("generate_synthetic: noise_rate must be in [0,1)");
    if (spec.num_clusters < 1 || spec.num_clusters > spec.num_items)
        throw std::invalid_argument("generate_synthetic: need 1 <= num_clusters <= num_items");
    if (spec.noise_rate > 0.0 && spec.num_clusters < 2)
        throw std::invalid_argument("generate_synthetic: noise requires at least 2 clusters");

    auto cluster_start = [&](size_t c) { return c * spec.num_items / spec.num_clusters; };

    SyntheticData out;
    out.events.reserve(spec.num_users * spec.interactions_per_user);
    out.unexpected.reserve(out.events.capacity());
    for (size_t u = 0; u < spec.num_users; ++u) {
        SplitRng rng(substream(spec.seed, u, kTagSynthetic));
        const size_t preferred = rng.below(spec.num_clusters);
        for (size_t i = 0; i < spec.interactions_per_user; ++i) {
            const bool noisy = spec.noise_rate > 0.0 && rng.uniform01() < spec.noise_rate;
            size_t cluster = preferred;
            if (noisy) {
                cluster = rng.below(spec.num_clusters - 1);
                if (cluster >= preferred) ++cluster;
            }
            const size_t lo = cluster_start(cluster), hi = cluster_start(cluster + 1);
            const size_t item = lo + rng.below(hi - lo);
            out.events.push_back(
                {"u" + std::to_string(u), "i" + std::to_string(item), static_cast<int64_t>(i)});
            out.unexpected.push_back(noisy ? 1 : 0);
        }
    }
    return out;
}

}  // namespace mpm
