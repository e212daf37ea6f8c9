#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "embedkit/checkpoint.hpp"

namespace embedkit {

struct SoupSpec {
    std::vector<std::string> ingredient_paths;
    std::vector<double> weights;  // empty = uniform
};

namespace detail {

// Order-independent double summation: addends are sorted by value first, so
// any permutation of the ingredient list produces bit-identical output.
inline double sorted_sum(std::vector<double>& vals) {
    std::sort(vals.begin(), vals.end());
    double acc = 0.0;
    for (double v : vals) acc += v;
    return acc;
}

}  // namespace detail

// Weight-normalized parameter average, computed in 64-bit and stored in
// 32-bit. Only parameters are averaged; optimizer state never exists here.
inline Checkpoint soup_checkpoints(const std::vector<Checkpoint>& ingredients,
                                   std::vector<double> weights) {
    if (ingredients.empty()) throw ConfigError("soup requires at least one ingredient");
    if (weights.empty()) weights.assign(ingredients.size(), 1.0);
    if (weights.size() != ingredients.size())
        throw ConfigError("soup: " + std::to_string(weights.size()) + " weights for " +
                          std::to_string(ingredients.size()) + " ingredients");
    for (double w : weights)
        if (w < 0.0) throw ConfigError("soup weights must be nonnegative");

    const Checkpoint& first = ingredients.front();
    for (std::size_t i = 1; i < ingredients.size(); ++i) {
        const Checkpoint& c = ingredients[i];
        if (!(c.encoder == first.encoder))
            throw IncompatibilityError("soup ingredient " + std::to_string(i) +
                                       " has a different encoder config");
        if (c.params.size() != first.params.size())
            throw IncompatibilityError("soup ingredient " + std::to_string(i) +
                                       " has a different parameter set");
        auto it = c.params.begin();
        auto ft = first.params.begin();
        for (; ft != first.params.end(); ++it, ++ft) {
            if (it->first != ft->first)
                throw IncompatibilityError("soup ingredient parameter name mismatch: " +
                                           it->first + " vs " + ft->first);
            if (!it->second.same_shape(ft->second))
                throw IncompatibilityError("soup ingredient shape mismatch for parameter " +
                                           it->first);
        }
    }

    std::vector<double> wsorted = weights;
    double total = detail::sorted_sum(wsorted);
    if (!(total > 0.0)) throw ConfigError("soup weights sum to zero");
    std::vector<double> norm(weights.size());
    for (std::size_t i = 0; i < weights.size(); ++i) norm[i] = weights[i] / total;

    Checkpoint out;
    out.encoder = first.encoder;
    out.origin = CkptOrigin::soup;
    std::uint64_t max_steps = 0;
    bool any_hn = false;
    std::string fp;
    for (std::size_t i = 0; i < ingredients.size(); ++i) {
        max_steps = std::max(max_steps, ingredients[i].step_count);
        any_hn |= ingredients[i].hard_negatives_used;
        fp += std::to_string(ingredients[i].config_fingerprint) + "*" + std::to_string(norm[i]) + ";";
    }
    out.hard_negatives_used = any_hn;
    out.step_count = max_steps;
    out.config_fingerprint = fnv1a64(fp);

    std::vector<double> addends(ingredients.size());
    for (const auto& [name, ft] : first.params) {
        Tensor avg(ft.shape());
        std::vector<const Tensor*> srcs(ingredients.size());
        for (std::size_t i = 0; i < ingredients.size(); ++i) srcs[i] = &ingredients[i].params.at(name);
        for (std::int64_t e = 0; e < ft.numel(); ++e) {
            for (std::size_t i = 0; i < srcs.size(); ++i)
                addends[i] = norm[i] * static_cast<double>((*srcs[i])[e]);
            avg[e] = static_cast<float>(detail::sorted_sum(addends));
        }
        out.params.emplace(name, std::move(avg));
    }
    return out;
}

inline Checkpoint soup(const SoupSpec& spec) {
    if (spec.ingredient_paths.empty()) throw ConfigError("soup requires at least one ingredient");
    std::vector<Checkpoint> ingredients;
    ingredients.reserve(spec.ingredient_paths.size());
    for (const auto& p : spec.ingredient_paths) ingredients.push_back(load_checkpoint(p));
    return soup_checkpoints(ingredients, spec.weights);
}

}  // namespace embedkit
