// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <thread>

#include "itrain/codec.hpp"
#include "itrain/config.hpp"

namespace itrain::support {

class TempDir {
public:
    TempDir() : path_(std::filesystem::temp_directory_path() / ("itrain-test-" + random_uuid())) {
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    [[nodiscard]] const std::filesystem::path& path() const noexcept { return path_; }
    [[nodiscard]] std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path);
    out << text;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline RunConfig small_mlp(std::uint64_t steps = 50, std::uint64_t seed = 0) {
    RunConfig c;
    c.task = TaskKind::mlp_sin;
    c.total_steps = steps;
    c.seed = seed;
    c.lr0 = 0.05;
    c.momentum = 0.9;
    c.hidden_width = 8;
    c.batch_size = 8;
    c.train_size = 64;
    c.val_size = 32;
    return c;
}

inline RunConfig quadratic(std::uint64_t steps, double lr0 = 5e-3) {
    RunConfig c;
    c.task = TaskKind::quadratic;
    c.total_steps = steps;
    c.lr0 = lr0;
    return c;
}

inline bool eventually(const std::function<bool()>& pred,
                       std::chrono::milliseconds timeout = std::chrono::seconds(10)) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    while (std::chrono::steady_clock::now() < deadline) {
        if (pred()) {
            return true;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(2));
    }
    return pred();
}

}  // namespace itrain::support
