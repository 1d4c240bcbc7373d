#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

#include "adares/tensor.hpp"

namespace adares {

/// Worker count for data-parallel loops: ADARES_THREADS if set, else the hardware concurrency.
inline std::size_t thread_count() {
    std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("ADARES_THREADS"); env && *env) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (*end != '\0' || v < 1) throw ConfigError(std::string("ADARES_THREADS must be a positive integer, got ") + env);
        return static_cast<std::size_t>(v);
    }
    return hw;
}

/// Runs body(i) for i in [0, n) over contiguous chunks. Each index is visited once, so
/// writes into pre-sized per-index slots stay deterministic.
template <typename Body>
void parallel_for(std::size_t n, Body&& body, std::size_t width = thread_count()) {
    width = std::min(width, n);
    if (width <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::exception_ptr> errors(width);
    std::vector<std::thread> pool;
    pool.reserve(width);
    const std::size_t chunk = (n + width - 1) / width;
    for (std::size_t w = 0; w < width; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w * chunk; i < std::min(n, (w + 1) * chunk); ++i) body(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace adares
