#pragma once

#include "mael/bencode.hpp"
#include "mael/store.hpp"

#include <algorithm>
#include <filesystem>
#include <random>
#include <string>

namespace testing {

namespace fs = std::filesystem;

inline fs::path fixtures() { return MAEL_FIXTURES; }
inline fs::path source_root() { return MAEL_SOURCE_ROOT; }

// Fresh directory under the system temp dir, removed on destruction.
class temp_dir {
public:
    explicit temp_dir(const std::string& tag = "t")
    {
        std::random_device rd;
        path_ = fs::temp_directory_path() / ("mael-" + tag + "-" + std::to_string(rd()) + std::to_string(rd()));
        fs::create_directories(path_);
    }
    ~temp_dir()
    {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    temp_dir(const temp_dir&) = delete;
    temp_dir& operator=(const temp_dir&) = delete;
    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& s) const { return path_ / s; }

private:
    fs::path path_;
};

// Hash over every path, size, mtime and content under `root`.
inline std::string tree_hash(const fs::path& root)
{
    std::vector<fs::path> all;
    for (auto it = fs::recursive_directory_iterator(root); it != fs::recursive_directory_iterator(); ++it)
        all.push_back(it->path());
    std::sort(all.begin(), all.end());
    std::string acc;
    for (const auto& p : all) {
        acc += fs::relative(p, root).generic_string();
        if (fs::is_regular_file(p)) {
            acc += " f " + std::to_string(fs::file_size(p)) + " " + std::to_string(mael::store::get_mtime(p)) + " ";
            acc += mael::sha1_bytes(*mael::store::read_file(p));
        } else {
            acc += " d";
        }
        acc += "\n";
    }
    return mael::to_hex(mael::sha1_bytes(acc));
}

// Random bencode value, bounded in depth and width.
inline mael::bencode::value random_value(std::mt19937_64& rng, int depth = 0)
{
    using namespace mael::bencode;
    int kind = static_cast<int>(rng() % (depth > 3 ? 2 : 4));
    auto rand_bytes = [&](std::size_t max) {
        mael::bytes b(rng() % (max + 1), '\0');
        for (auto& c : b) c = static_cast<char>(rng() & 0xff);
        return b;
    };
    switch (kind) {
    case 0: {
        auto v = static_cast<std::int64_t>(rng());
        if (rng() % 2) v %= 1000;
        return value(v);
    }
    case 1: return value(rand_bytes(24));
    case 2: {
        list l;
        for (auto n = rng() % 5; n > 0; --n) l.push_back(random_value(rng, depth + 1));
        return value(std::move(l));
    }
    default: {
        dict d;
        for (auto n = rng() % 5; n > 0; --n) d[rand_bytes(8)] = random_value(rng, depth + 1);
        return value(std::move(d));
    }
    }
}

}  // namespace testing
