#pragma once

// Interaction-log ingestion, calendar-window session segmentation,
// event-level splitting and negative sampling.
//
// Input formats (TSV, lines starting with '#' skipped):
//   events: user_id <TAB> item_id <TAB> timestamp_seconds [<TAB> rating]
//   social: user_id <TAB> friend_id
// Ratings, when present, are collapsed to implicit presence. Ids are
// opaque strings mapped to dense indices in first-seen order.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "dream/error.hpp"
#include "dream/rng.hpp"

namespace dream {

enum class Granularity : std::uint8_t { week, month };

inline Granularity granularity_from_string(const std::string& s) {
    if (s == "week") return Granularity::week;
    if (s == "month") return Granularity::month;
    throw ConfigError("granularity must be 'week' or 'month', got '" + s + "'");
}

inline const char* to_string(Granularity g) {
    return g == Granularity::week ? "week" : "month";
}

struct Event {
    int user = 0;
    int item = 0;
    std::int64_t ts = 0;
};

struct Dataset {
    std::vector<std::string> user_ids; // dense index -> original id
    std::vector<std::string> item_ids;
    std::vector<Event> events;                  // sorted by (user, ts, item)
    std::vector<std::pair<int, int>> social_edges; // directed (user, friend)

    std::size_t n_users() const { return user_ids.size(); }
    std::size_t n_items() const { return item_ids.size(); }

    // Outgoing neighbors per user, sorted ascending, deduplicated.
    std::vector<std::vector<int>> friend_lists() const {
        std::vector<std::vector<int>> out(n_users());
        for (auto [u, v] : social_edges) out[static_cast<std::size_t>(u)].push_back(v);
        for (auto& l : out) {
            std::sort(l.begin(), l.end());
            l.erase(std::unique(l.begin(), l.end()), l.end());
        }
        return out;
    }

    std::vector<std::set<int>> interacted_sets() const {
        std::vector<std::set<int>> out(n_users());
        for (const Event& e : events) out[static_cast<std::size_t>(e.user)].insert(e.item);
        return out;
    }
};

// ---- calendar helpers (UTC) -----------------------------------------------

// Days-from-civil / civil-from-days, proleptic Gregorian.
inline std::int64_t days_from_civil(int y, unsigned m, unsigned d) {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

inline void civil_from_days(std::int64_t z, int& y, unsigned& m, unsigned& d) {
    z += 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const std::int64_t yy = static_cast<std::int64_t>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    d = doy - (153 * mp + 2) / 5 + 1;
    m = mp + (mp < 10 ? 3 : -9);
    y = static_cast<int>(yy + (m <= 2));
}

// Window id of a timestamp: months since 1970-01 or Monday-aligned weeks
// since epoch (ISO weeks without the year split).
inline std::int64_t window_of(std::int64_t ts, Granularity g) {
    const std::int64_t day = ts / 86400;
    if (g == Granularity::week) return (day + 3) / 7; // 1970-01-01 was a Thursday
    int y;
    unsigned m, d;
    civil_from_days(day, y, m, d);
    return static_cast<std::int64_t>(y - 1970) * 12 + (m - 1);
}

// ---- sessions ---------------------------------------------------------------

struct Session {
    int index = 0;          // 1-based chronological rank within the user
    std::int64_t window = 0; // calendar window id
    std::int64_t start_ts = 0;
    std::vector<int> items; // interaction order
};

struct SessionSequence {
    int user = 0;
    std::vector<Session> sessions;
};

// ---- split -------------------------------------------------------------------

enum class SplitLabel : std::uint8_t { train, valid, test };

struct SplitAssignment {
    std::vector<SplitLabel> labels; // parallel to Dataset::events
};

struct SplitRatios {
    double train = 0.8;
    double valid = 0.1;
    double test = 0.1;
};

struct DatasetStats {
    std::size_t users = 0;
    std::size_t items = 0;
    std::size_t events = 0;
    std::size_t social_links = 0;
    double avg_sessions_per_user = 0.0;
    double avg_real_friends_per_user = 0.0;
};

// ---- ingestion ---------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_tsv(const std::string& line) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
        const std::size_t tab = line.find('\t', start);
        if (tab == std::string::npos) {
            fields.push_back(line.substr(start));
            break;
        }
        fields.push_back(line.substr(start, tab - start));
        start = tab + 1;
    }
    if (!fields.empty() && !fields.back().empty() && fields.back().back() == '\r')
        fields.back().pop_back();
    return fields;
}

struct IdMap {
    std::unordered_map<std::string, int> index;
    std::vector<std::string>* names;

    int get(const std::string& id) {
        auto it = index.find(id);
        if (it != index.end()) return it->second;
        const int next = static_cast<int>(names->size());
        names->push_back(id);
        index.emplace(id, next);
        return next;
    }
};

} // namespace detail

inline Dataset ingest(const std::string& events_path, const std::string& social_path) {
    Dataset ds;
    detail::IdMap users{{}, &ds.user_ids};
    detail::IdMap items{{}, &ds.item_ids};

    std::ifstream ev(events_path);
    if (!ev) throw IoError("cannot open events file: " + events_path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(ev, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        auto fields = detail::split_tsv(line);
        if (fields.size() < 3)
            throw ParseError(events_path + ":" + std::to_string(line_no) +
                             ": expected user<TAB>item<TAB>timestamp");
        std::int64_t ts = 0;
        try {
            std::size_t pos = 0;
            ts = std::stoll(fields[2], &pos);
            if (pos != fields[2].size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw ParseError(events_path + ":" + std::to_string(line_no) +
                             ": bad timestamp '" + fields[2] + "'");
        }
        if (ts < 0)
            throw ParseError(events_path + ":" + std::to_string(line_no) +
                             ": negative timestamp");
        // 4th column (explicit rating) collapses to implicit presence.
        ds.events.push_back({users.get(fields[0]), items.get(fields[1]), ts});
    }

    if (!social_path.empty()) {
        std::ifstream so(social_path);
        if (!so) throw IoError("cannot open social file: " + social_path);
        line_no = 0;
        while (std::getline(so, line)) {
            ++line_no;
            if (line.empty() || line[0] == '#') continue;
            auto fields = detail::split_tsv(line);
            if (fields.size() < 2)
                throw ParseError(social_path + ":" + std::to_string(line_no) +
                                 ": expected user<TAB>friend");
            const int u = users.get(fields[0]);
            const int v = users.get(fields[1]);
            if (u != v) ds.social_edges.push_back({u, v});
        }
    }

    std::sort(ds.events.begin(), ds.events.end(), [](const Event& a, const Event& b) {
        if (a.user != b.user) return a.user < b.user;
        if (a.ts != b.ts) return a.ts < b.ts;
        return a.item < b.item;
    });
    ds.events.erase(std::unique(ds.events.begin(), ds.events.end(),
                                [](const Event& a, const Event& b) {
                                    return a.user == b.user && a.item == b.item && a.ts == b.ts;
                                }),
                    ds.events.end());
    std::sort(ds.social_edges.begin(), ds.social_edges.end());
    ds.social_edges.erase(std::unique(ds.social_edges.begin(), ds.social_edges.end()),
                          ds.social_edges.end());

    if (ds.user_ids.empty() || ds.item_ids.empty())
        throw ParseError("dataset is empty: no users or no items after ingestion");
    return ds;
}

// ---- segmentation -------------------------------------------------------------

// Buckets each user's events into fixed calendar windows; empty windows are
// omitted and session indices count non-empty windows chronologically.
// The optional filter restricts to events carrying one split label.
inline std::vector<SessionSequence> segment_sessions(const Dataset& ds, Granularity g,
                                                     const SplitAssignment* split = nullptr,
                                                     SplitLabel keep = SplitLabel::train) {
    std::vector<SessionSequence> out(ds.n_users());
    for (std::size_t u = 0; u < ds.n_users(); ++u) out[u].user = static_cast<int>(u);
    for (std::size_t i = 0; i < ds.events.size(); ++i) {
        if (split && split->labels[i] != keep) continue;
        const Event& e = ds.events[i];
        auto& seq = out[static_cast<std::size_t>(e.user)];
        const std::int64_t w = window_of(e.ts, g);
        if (seq.sessions.empty() || seq.sessions.back().window != w) {
            Session s;
            s.index = static_cast<int>(seq.sessions.size()) + 1;
            s.window = w;
            s.start_ts = e.ts;
            seq.sessions.push_back(std::move(s));
        }
        seq.sessions.back().items.push_back(e.item);
    }
    return out;
}

// ---- split --------------------------------------------------------------------

// Event-level assignment; a pure function of (seed, event index).
inline SplitAssignment split(const Dataset& ds, const SplitRatios& ratios, std::uint64_t seed) {
    const double total = ratios.train + ratios.valid + ratios.test;
    if (std::abs(total - 1.0) > 1e-9)
        throw ConfigError("split ratios must sum to 1, got " + std::to_string(total));
    SplitAssignment out;
    out.labels.resize(ds.events.size());
    for (std::size_t i = 0; i < ds.events.size(); ++i) {
        const double u =
            static_cast<double>(mix_seed(seed, 0x5eed5eed, i) >> 11) * 0x1.0p-53;
        if (u < ratios.train)
            out.labels[i] = SplitLabel::train;
        else if (u < ratios.train + ratios.valid)
            out.labels[i] = SplitLabel::valid;
        else
            out.labels[i] = SplitLabel::test;
    }
    return out;
}

// ---- negative sampling ----------------------------------------------------------

// `count` distinct items the user never interacted with in any split,
// uniform without replacement, deterministic under seed.
inline std::vector<int> sample_negatives(const Dataset& ds, const std::set<int>& interacted,
                                         std::size_t count, std::uint64_t seed) {
    const std::size_t m = ds.n_items();
    const std::size_t available = m - interacted.size();
    if (count > available)
        throw SamplingError("sample_negatives: requested " + std::to_string(count) +
                            " but only " + std::to_string(available) + " unrated items exist");
    Rng rng(seed);
    std::vector<int> out;
    out.reserve(count);
    if (available <= 4 * count || m < 1024) {
        // Materialize the complement and take a seeded partial shuffle.
        std::vector<int> pool;
        pool.reserve(available);
        for (std::size_t i = 0; i < m; ++i)
            if (!interacted.count(static_cast<int>(i))) pool.push_back(static_cast<int>(i));
        for (std::size_t i = 0; i < count; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
            std::swap(pool[i], pool[j]);
            out.push_back(pool[i]);
        }
    } else {
        std::unordered_set<int> seen;
        while (out.size() < count) {
            const int cand = static_cast<int>(rng.below(m));
            if (interacted.count(cand) || !seen.insert(cand).second) continue;
            out.push_back(cand);
        }
    }
    return out;
}

inline std::vector<int> sample_negatives(const Dataset& ds, int user, std::size_t count,
                                         std::uint64_t seed) {
    std::set<int> interacted;
    for (const Event& e : ds.events)
        if (e.user == user) interacted.insert(e.item);
    return sample_negatives(ds, interacted, count, seed);
}

// ---- stats -----------------------------------------------------------------------

inline DatasetStats stats(const Dataset& ds, const std::vector<SessionSequence>& sessions) {
    DatasetStats s;
    s.users = ds.n_users();
    s.items = ds.n_items();
    s.events = ds.events.size();
    s.social_links = ds.social_edges.size();
    std::size_t total_sessions = 0;
    for (const auto& seq : sessions) total_sessions += seq.sessions.size();
    s.avg_sessions_per_user = s.users ? static_cast<double>(total_sessions) / s.users : 0.0;
    s.avg_real_friends_per_user =
        s.users ? static_cast<double>(s.social_links) / s.users : 0.0;
    return s;
}

// ---- binary dataset artifact -------------------------------------------------------

inline void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write dataset file: " + path);
    auto put_u64 = [&](std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); };
    auto put_str = [&](const std::string& s) {
        put_u64(s.size());
        out.write(s.data(), static_cast<std::streamsize>(s.size()));
    };
    out.write("DRMD\x01\x00\x00\x00", 8);
    put_u64(ds.user_ids.size());
    for (const auto& s : ds.user_ids) put_str(s);
    put_u64(ds.item_ids.size());
    for (const auto& s : ds.item_ids) put_str(s);
    put_u64(ds.events.size());
    for (const Event& e : ds.events) {
        put_u64(static_cast<std::uint64_t>(e.user));
        put_u64(static_cast<std::uint64_t>(e.item));
        put_u64(static_cast<std::uint64_t>(e.ts));
    }
    put_u64(ds.social_edges.size());
    for (auto [u, v] : ds.social_edges) {
        put_u64(static_cast<std::uint64_t>(u));
        put_u64(static_cast<std::uint64_t>(v));
    }
    if (!out) throw IoError("short write to dataset file: " + path);
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open dataset file: " + path);
    auto get_u64 = [&]() {
        std::uint64_t v = 0;
        in.read(reinterpret_cast<char*>(&v), 8);
        if (!in) throw ParseError("truncated dataset file: " + path);
        return v;
    };
    auto get_str = [&]() {
        std::string s(get_u64(), '\0');
        in.read(s.data(), static_cast<std::streamsize>(s.size()));
        if (!in) throw ParseError("truncated dataset file: " + path);
        return s;
    };
    char magic[8];
    in.read(magic, 8);
    if (!in || std::string(magic, 4) != "DRMD")
        throw ParseError("not a dataset file: " + path);
    Dataset ds;
    ds.user_ids.resize(get_u64());
    for (auto& s : ds.user_ids) s = get_str();
    ds.item_ids.resize(get_u64());
    for (auto& s : ds.item_ids) s = get_str();
    ds.events.resize(get_u64());
    for (Event& e : ds.events) {
        e.user = static_cast<int>(get_u64());
        e.item = static_cast<int>(get_u64());
        e.ts = static_cast<std::int64_t>(get_u64());
    }
    ds.social_edges.resize(get_u64());
    for (auto& [u, v] : ds.social_edges) {
        u = static_cast<int>(get_u64());
        v = static_cast<int>(get_u64());
    }
    return ds;
}

} // namespace dream
