#pragma once

#include <filesystem>
#include <string>
#include <unistd.h>

#include "convmap/dataio.hpp"

namespace testing_util {

/// Bernoulli(density) matrix; every user gets at least three interactions.
inline convmap::InteractionMatrix random_matrix(convmap::Index users, convmap::Index items, double density,
                                                std::uint64_t seed, bool timestamps) {
    convmap::Rng rng(seed);
    std::vector<convmap::Interaction> e;
    std::int64_t t = 0;
    for (convmap::Index u = 0; u < users; ++u) {
        std::size_t count = 0;
        for (convmap::Index i = 0; i < items; ++i)
            if (rng.uniform() < density) {
                e.push_back({u, i, 1.0, timestamps ? ++t : 0});
                ++count;
            }
        for (convmap::Index i = 0; count < 3 && i < items; ++i) {
            bool present = false;
            for (const auto& x : e) present = present || (x.user == u && x.item == i);
            if (!present) {
                e.push_back({u, i, 1.0, timestamps ? ++t : 0});
                ++count;
            }
        }
    }
    return convmap::InteractionMatrix::from_entries(users, items, std::move(e), timestamps);
}

inline std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("convmap_test_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace testing_util
