#pragma once

#include "mael/common.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <utility>
#include <variant>
#include <vector>

namespace mael::bencode {

enum class errc {
    malformed_input,
    invalid_value,
};

class error : public coded_error<errc> {
public:
    error(errc code, std::size_t offset, const std::string& what);
    // Byte offset into the input where decoding failed; 0 for encode errors.
    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

class value;
using list = std::vector<value>;
// std::string compares as unsigned char, so map order is raw byte order.
using dict = std::map<bytes, value>;

class value {
public:
    using variant_type = std::variant<std::int64_t, bytes, list, dict>;

    value() : v_(std::int64_t{0}) {}
    value(std::int64_t i) : v_(i) {}
    value(int i) : v_(std::int64_t{i}) {}
    value(bytes s) : v_(std::move(s)) {}
    value(const char* s) : v_(bytes(s)) {}
    value(list l) : v_(std::move(l)) {}
    value(dict d) : v_(std::move(d)) {}

    bool is_int() const { return std::holds_alternative<std::int64_t>(v_); }
    bool is_string() const { return std::holds_alternative<bytes>(v_); }
    bool is_list() const { return std::holds_alternative<list>(v_); }
    bool is_dict() const { return std::holds_alternative<dict>(v_); }

    // Accessors throw error(invalid_value) on a type mismatch.
    std::int64_t as_int() const;
    const bytes& as_string() const;
    const list& as_list() const;
    const dict& as_dict() const;
    list& as_list();
    dict& as_dict();

    // Dictionary lookup; nullptr when this is not a dict or the key is absent.
    const value* find(bytes_view key) const;

    const variant_type& variant() const { return v_; }

    friend bool operator==(const value&, const value&) = default;

private:
    variant_type v_;
};

struct violation {
    std::size_t offset;
    std::string what;
};

struct decode_options {
    // Record canonicality violations (unsorted or duplicate keys, leading
    // zeros, negative zero, trailing bytes) instead of failing.
    bool lenient = false;
    std::size_t max_depth = 128;
};

struct decode_result {
    value root;
    std::vector<violation> violations;
};

value decode(bytes_view input);
decode_result decode(bytes_view input, const decode_options& opts);

bytes encode(const value& v);

// Locates the raw byte span [first, second) of the value stored under `key`
// in the top-level dictionary of `input`. Used to hash an info dictionary
// exactly as stored. Throws error on malformed input.
std::optional<std::pair<std::size_t, std::size_t>> dict_value_span(bytes_view input, bytes_view key);

}  // namespace mael::bencode
