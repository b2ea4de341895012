#pragma once

// Synthetic datasets with planted clustered preferences and social
// homophily: users in cluster c consume items from block c (with a little
// noise) across several monthly windows, and friendships stay inside the
// cluster. A learnable signal with a known structure.

#include <sstream>
#include <string>
#include <utility>

#include "dream/dataset.hpp"
#include "dream/rng.hpp"

namespace testutil {

struct SyntheticSpec {
    int users = 40;
    int items = 60;
    int clusters = 4;
    int windows = 5;
    int events_per_window = 3;
    int friends_per_user = 4;
    double off_cluster_noise = 0.05;
    std::uint64_t seed = 1;
};

// Returns (events TSV, social TSV).
inline std::pair<std::string, std::string> synthetic_tsv(const SyntheticSpec& spec) {
    dream::Rng rng(spec.seed);
    std::ostringstream events, social;
    const int users_per_cluster = spec.users / spec.clusters;
    const int items_per_cluster = spec.items / spec.clusters;

    for (int u = 0; u < spec.users; ++u) {
        const int cluster = u / users_per_cluster < spec.clusters ? u / users_per_cluster
                                                                  : spec.clusters - 1;
        for (int w = 0; w < spec.windows; ++w) {
            for (int e = 0; e < spec.events_per_window; ++e) {
                int item;
                if (rng.uniform() < spec.off_cluster_noise) {
                    item = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.items)));
                } else {
                    item = cluster * items_per_cluster +
                           static_cast<int>(rng.below(static_cast<std::uint64_t>(items_per_cluster)));
                }
                const std::int64_t day =
                    dream::days_from_civil(1970 + w / 12, static_cast<unsigned>(w % 12 + 1),
                                           1 + static_cast<unsigned>(rng.below(26)));
                const std::int64_t ts = day * 86400 + static_cast<std::int64_t>(rng.below(86400));
                events << "user" << u << "\titem" << item << "\t" << ts << "\n";
            }
        }
        // Homophilous social edges: friends come from the same cluster.
        for (int f = 0; f < spec.friends_per_user; ++f) {
            const int friend_u = cluster * users_per_cluster +
                                 static_cast<int>(rng.below(static_cast<std::uint64_t>(users_per_cluster)));
            if (friend_u != u) social << "user" << u << "\tuser" << friend_u << "\n";
        }
    }
    return {events.str(), social.str()};
}

} // namespace testutil
