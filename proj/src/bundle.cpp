#include "mael/bundle.hpp"

#include "mael/bencode.hpp"

#include <algorithm>
#include <cctype>
#include <random>

namespace mael::bundle {

std::string to_string(errc e)
{
    switch (e) {
    case errc::empty_tree: return "EmptyTree";
    case errc::missing_entry: return "MissingEntry";
    case errc::bad_path: return "BadPath";
    case errc::malformed_manifest: return "MalformedManifest";
    case errc::unknown_alias: return "UnknownAlias";
    case errc::bad_authority: return "BadAuthority";
    case errc::path_escape: return "PathEscape";
    case errc::not_bittorrent_url: return "NotBittorrentUrl";
    case errc::member_incomplete: return "MemberIncomplete";
    case errc::mount_collision: return "MountCollision";
    }
    return "Unknown";
}

namespace {

std::vector<std::string_view> split(std::string_view s, char sep)
{
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        auto pos = s.find(sep, start);
        out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

bool is_path_prefix(std::string_view prefix, std::string_view path)
{
    if (prefix == path) return true;
    return path.size() > prefix.size() && path.substr(0, prefix.size()) == prefix && path[prefix.size()] == '/';
}

}  // namespace

bool valid_path(std::string_view path)
{
    if (path.empty() || path.front() == '/' || path.find('\\') != std::string_view::npos) return false;
    for (auto part : split(path, '/'))
        if (part.empty() || part == "." || part == "..") return false;
    return true;
}

void validate(const website& site)
{
    if (site.tree.empty()) throw error(errc::empty_tree, "site has no files");
    for (const auto& [path, content] : site.tree) {
        if (!valid_path(path)) throw error(errc::bad_path, "invalid site path '" + path + "'");
        if (path == manifest_path) throw error(errc::bad_path, "'.bundle' is reserved for the manifest");
    }
    if (!site.tree.count(site.entry)) throw error(errc::missing_entry, "entry '" + site.entry + "' is not in the site");
}

bytes encode_manifest(const manifest& m)
{
    bencode::list members;
    for (std::size_t i = 1; i < m.members.size(); ++i)
        members.emplace_back(bencode::dict{
            {"infohash", bencode::value(m.members[i].hash.to_bytes())},
            {"prefix", bencode::value(m.members[i].prefix)},
        });
    bencode::dict d{
        {"entry", bencode::value(m.entry)},
        {"members", bencode::value(std::move(members))},
        {"name", bencode::value(m.name)},
        {"version", bencode::value(m.version)},
    };
    return bencode::encode(bencode::value(std::move(d)));
}

manifest decode_manifest(bytes_view raw, const infohash& base)
{
    bencode::value v;
    try {
        v = bencode::decode(raw);
    } catch (const bencode::error& e) {
        throw error(errc::malformed_manifest, std::string("manifest: ") + e.what());
    }
    auto str = [&](const bencode::value& d, const char* key) -> const bytes& {
        const auto* x = d.find(key);
        if (!x || !x->is_string()) throw error(errc::malformed_manifest, std::string("manifest lacks '") + key + "'");
        return x->as_string();
    };
    manifest m;
    m.name = str(v, "name");
    if (const auto* e = v.find("entry"); e && e->is_string()) m.entry = e->as_string();
    const auto* ver = v.find("version");
    if (!ver || !ver->is_int()) throw error(errc::malformed_manifest, "manifest lacks 'version'");
    m.version = ver->as_int();
    m.members.push_back({base, ""});
    const auto* members = v.find("members");
    if (!members || !members->is_list()) throw error(errc::malformed_manifest, "manifest lacks 'members'");
    for (const auto& item : members->as_list()) {
        const auto& h = str(item, "infohash");
        if (h.size() != 20) throw error(errc::malformed_manifest, "member infohash is not 20 bytes");
        const auto& prefix = str(item, "prefix");
        if (!valid_path(prefix)) throw error(errc::malformed_manifest, "member prefix '" + prefix + "' is not a valid path");
        for (std::size_t i = 1; i < m.members.size(); ++i)
            if (is_path_prefix(m.members[i].prefix, prefix) || is_path_prefix(prefix, m.members[i].prefix))
                throw error(errc::malformed_manifest, "member prefixes '" + m.members[i].prefix + "' and '" + prefix +
                                                          "' overlap");
        m.members.push_back({infohash::from_bytes(h), prefix});
    }
    return m;
}

published publish(const website& site, publish_mode mode, const publish_options& opts)
{
    validate(site);
    published out;
    file_tree base_files;
    std::vector<std::pair<std::string, torrent::torrent_meta>> split_members;
    for (const auto& [path, content] : site.tree) {
        if (mode.split_threshold && static_cast<std::int64_t>(content.size()) > *mode.split_threshold) {
            auto slash = path.rfind('/');
            std::string leaf = slash == std::string::npos ? path : path.substr(slash + 1);
            auto meta = torrent::build_torrent({{leaf, content}}, opts.piece_length, opts.trackers);
            out.contents[meta.hash] = {{leaf, content}};
            split_members.emplace_back(path, std::move(meta));
        } else {
            base_files.emplace(path, content);
        }
    }

    out.man.name = opts.name;
    out.man.version = opts.version;
    out.man.entry = site.entry;
    out.man.members.push_back({});  // base, filled below
    for (const auto& [path, meta] : split_members) out.man.members.push_back({meta.hash, path});

    base_files.emplace(std::string(manifest_path), encode_manifest(out.man));
    auto base = torrent::build_torrent(base_files, opts.piece_length, opts.trackers, opts.name);
    out.man.members[0] = {base.hash, ""};
    out.contents[base.hash] = std::move(base_files);
    out.torrents.push_back(std::move(base));
    for (auto& [path, meta] : split_members) out.torrents.push_back(std::move(meta));
    return out;
}

file_tree split_content(const torrent::info_dict& info, bytes_view data)
{
    file_tree out;
    std::size_t off = 0;
    for (const auto& f : info.file_list()) {
        auto len = static_cast<std::size_t>(f.length);
        out[f.joined()] = bytes(data.substr(std::min(off, data.size()), len));
        off += len;
    }
    return out;
}

file_tree assemble(const manifest& m, const std::map<infohash, std::pair<torrent::info_dict, file_tree>>& members)
{
    file_tree out;
    auto mount = [&](const std::string& path, const bytes& content) {
        if (!out.emplace(path, content).second) throw error(errc::mount_collision, "two members provide '" + path + "'");
    };
    for (std::size_t i = 0; i < m.members.size(); ++i) {
        const auto& mem = m.members[i];
        auto it = members.find(mem.hash);
        if (it == members.end()) throw error(errc::member_incomplete, "member " + mem.hash.hex() + " is not available");
        const auto& [info, files] = it->second;
        for (const auto& f : info.file_list()) {
            auto c = files.find(f.joined());
            if (c == files.end() || static_cast<std::int64_t>(c->second.size()) != f.length)
                throw error(errc::member_incomplete, "member " + mem.hash.hex() + " lacks complete '" + f.joined() + "'");
        }
        for (const auto& f : info.file_list()) {
            const auto& content = files.at(f.joined());
            if (i == 0) {
                if (f.joined() != manifest_path) mount(f.joined(), content);
            } else if (info.single_file()) {
                mount(mem.prefix, content);
            } else {
                mount(mem.prefix + "/" + f.joined(), content);
            }
        }
    }
    return out;
}

std::string normalize_path(std::string_view path, std::string_view entry)
{
    auto cut = path.find_first_of("?#");
    std::string decoded = percent_decode(path.substr(0, cut));
    std::string out;
    for (auto part : split(decoded, '/')) {
        if (part.empty() || part == ".") continue;
        if (part == "..") throw error(errc::path_escape, "path '" + std::string(path) + "' escapes the site root");
        if (part.find('\\') != std::string_view::npos)
            throw error(errc::path_escape, "path '" + std::string(path) + "' contains a backslash");
        if (!out.empty()) out.push_back('/');
        out += part;
    }
    if (out.empty()) return std::string(entry);
    if (!decoded.empty() && decoded.back() == '/') out += "/index.html";
    return out;
}

site_url resolve_url(std::string_view url, const alias_map& aliases, std::string_view entry)
{
    constexpr std::string_view scheme = "bittorrent://";
    if (url.size() < scheme.size() || !std::equal(scheme.begin(), scheme.end(), url.begin(), [](char a, char b) {
            return a == std::tolower(static_cast<unsigned char>(b));
        }))
        throw error(errc::not_bittorrent_url, "URL does not use the bittorrent scheme");
    auto rest = url.substr(scheme.size());
    auto slash = rest.find('/');
    std::string authority(rest.substr(0, slash));
    std::string_view path = slash == std::string_view::npos ? std::string_view{} : rest.substr(slash);
    if (auto q = authority.find_first_of("?#"); q != std::string::npos) {
        path = rest.substr(q);
        authority.resize(q);
    }
    if (authority.empty()) throw error(errc::bad_authority, "URL has no authority");

    site_url out;
    if (auto h = infohash::from_hex(authority); h && authority.size() == 40) {
        out.hash = *h;
    } else {
        bool name_chars = std::all_of(authority.begin(), authority.end(), [](unsigned char c) {
            return std::isalnum(c) || c == '-' || c == '_' || c == '.';
        });
        if (!name_chars) throw error(errc::bad_authority, "authority '" + authority + "' is neither hex nor an alias name");
        std::string lower = authority;
        for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        auto it = aliases.find(lower);
        if (it == aliases.end()) throw error(errc::unknown_alias, "no alias named '" + authority + "'");
        out.hash = it->second;
    }
    out.path = normalize_path(path, entry);
    return out;
}

bytes save_aliases(const alias_map& aliases)
{
    bencode::dict d;
    for (const auto& [name, h] : aliases) d[name] = bencode::value(h.to_bytes());
    return bencode::encode(bencode::value(std::move(d)));
}

alias_map load_aliases(bytes_view raw)
{
    bencode::value v;
    try {
        v = bencode::decode(raw);
    } catch (const bencode::error& e) {
        throw error(errc::malformed_manifest, std::string("alias file: ") + e.what());
    }
    if (!v.is_dict()) throw error(errc::malformed_manifest, "alias file is not a dictionary");
    alias_map out;
    for (const auto& [name, h] : v.as_dict()) {
        if (!h.is_string() || h.as_string().size() != 20)
            throw error(errc::malformed_manifest, "alias '" + name + "' does not map to a 20-byte infohash");
        out.emplace(name, infohash::from_bytes(h.as_string()));
    }
    return out;
}

website generate_demo_site(std::uint64_t seed, std::size_t files, std::int64_t total_bytes)
{
    static const std::vector<std::string> names = {
        "about.html",       "css/site.css",       "js/app.js",         "images/logo.png",
        "images/photo1.jpg", "images/photo2.jpg", "images/photo3.jpg", "fonts/body.woff",
        "media/intro.mp4",  "data/feed.json",     "robots.txt",
    };
    std::mt19937_64 rng(seed);
    website site;
    std::vector<std::string> paths;
    for (std::size_t i = 0; i + 1 < files; ++i)
        paths.push_back(i < names.size() ? names[i] : "assets/blob" + std::to_string(i) + ".bin");

    std::string index = "<!doctype html>\n<html><head><title>demo site " + std::to_string(seed) +
                        "</title><link rel=\"stylesheet\" href=\"css/site.css\"></head>\n<body>\n<h1>Demo</h1>\n<ul>\n";
    for (const auto& p : paths) index += "<li><a href=\"" + p + "\">" + p + "</a></li>\n";
    index += "</ul>\n</body></html>\n";
    site.tree["index.html"] = index;

    auto remaining = std::max<std::int64_t>(0, total_bytes - static_cast<std::int64_t>(index.size()));
    std::vector<std::uint64_t> weights;
    std::uint64_t weight_sum = 0;
    for (const auto& p : paths) {
        // The video dominates, so split publishing has something to split.
        std::uint64_t w = p.rfind("media/", 0) == 0 ? 6000 : 200 + rng() % 800;
        weights.push_back(w);
        weight_sum += w;
    }
    std::int64_t assigned = 0;
    for (std::size_t i = 0; i < paths.size(); ++i) {
        std::int64_t size = i + 1 == paths.size()
                                ? remaining - assigned
                                : static_cast<std::int64_t>(static_cast<std::uint64_t>(remaining) * weights[i] / weight_sum);
        assigned += size;
        bool text = paths[i].ends_with(".html") || paths[i].ends_with(".css") || paths[i].ends_with(".js") ||
                    paths[i].ends_with(".json") || paths[i].ends_with(".txt");
        bytes content(static_cast<std::size_t>(size), '\0');
        for (auto& c : content) {
            auto r = rng();
            c = text ? static_cast<char>("abcdefghijklmnopqrstuvwxyz \n"[r % 28]) : static_cast<char>(r & 0xff);
        }
        site.tree[paths[i]] = std::move(content);
    }
    return site;
}

}  // namespace mael::bundle
