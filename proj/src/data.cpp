#include "metairnet/data.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "metairnet/error.hpp"
#include "metairnet/fsutil.hpp"
#include "metairnet/random.hpp"

namespace fs = std::filesystem;

namespace metairnet {

std::size_t DatasetIndex::image_count() const {
    std::size_t n = 0;
    for (const auto& c : classes) n += c.images.size();
    return n;
}

const ClassImages* DatasetIndex::find(const ClassId& id) const {
    for (const auto& c : classes)
        if (c.id == id) return &c;
    return nullptr;
}

std::vector<ClassId> DatasetIndex::class_ids() const {
    std::vector<ClassId> ids;
    for (const auto& c : classes) ids.push_back(c.id);
    return ids;
}

void DatasetIndex::validate() const {
    std::set<ClassId> ids;
    std::set<std::string> paths;
    for (const auto& c : classes) {
        if (!ids.insert(c.id).second) throw ValidationError("duplicate class " + c.id + " in index");
        for (const auto& r : c.images)
            if (!paths.insert(r.path).second) throw ValidationError("duplicate image record " + r.path);
    }
}

// ---------------------------------------------------------------------------
// SplitSpec

void SplitSpec::validate() const {
    const std::pair<const char*, const std::vector<ClassId>*> parts[] = {{"base", &base}, {"val", &val}, {"novel", &novel}};
    std::map<ClassId, std::string> owner;
    for (const auto& [name, ids] : parts) {
        if (ids->empty()) throw ValidationError(std::string("split partition '") + name + "' is empty");
        for (const auto& id : *ids) {
            auto [it, fresh] = owner.emplace(id, name);
            if (!fresh) {
                if (it->second == name)
                    throw ValidationError("class " + id + " listed twice in partition '" + name + "'");
                throw ValidationError("class " + id + " appears in both '" + it->second + "' and '" + name + "'");
            }
        }
    }
}

std::vector<ClassId> SplitSpec::all() const {
    std::vector<ClassId> ids = base;
    ids.insert(ids.end(), val.begin(), val.end());
    ids.insert(ids.end(), novel.begin(), novel.end());
    return ids;
}

SplitSpec SplitSpec::parse(std::string_view text) {
    SplitSpec spec;
    std::vector<ClassId>* current = nullptr;
    std::set<std::string> seen_sections;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream words(line);
        std::string w;
        while (words >> w) {
            if (w.front() == '[') {
                if (w.back() != ']') throw ValidationError("malformed section header on line " + std::to_string(lineno));
                std::string name = w.substr(1, w.size() - 2);
                std::transform(name.begin(), name.end(), name.begin(), ::tolower);
                if (name == "base" || name == "train" || name == "training") current = &spec.base, name = "base";
                else if (name == "val" || name == "validation") current = &spec.val, name = "val";
                else if (name == "novel" || name == "test") current = &spec.novel, name = "novel";
                else throw ValidationError("unknown split section [" + name + "] on line " + std::to_string(lineno));
                if (!seen_sections.insert(name).second)
                    throw ValidationError("split section [" + name + "] repeated on line " + std::to_string(lineno));
                continue;
            }
            if (!current) throw ValidationError("class ID before any section on line " + std::to_string(lineno));
            current->push_back(w);
        }
    }
    spec.validate();
    return spec;
}

SplitSpec SplitSpec::from_file(const fs::path& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const Error&) {
        throw IngestionError("cannot read split file " + path.string());
    }
    return parse(text);
}

std::string SplitSpec::to_text() const {
    std::ostringstream os;
    auto section = [&](const char* name, const std::vector<ClassId>& ids) {
        os << '[' << name << "]\n";
        for (std::size_t i = 0; i < ids.size(); ++i) os << ids[i] << ((i + 1) % 12 == 0 || i + 1 == ids.size() ? "\n" : ", ");
    };
    section("base", base);
    section("val", val);
    section("novel", novel);
    return os.str();
}

// ---------------------------------------------------------------------------
// Indexing

namespace {

bool is_image_file(const fs::path& p) {
    auto ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
    return ext == ".ppm" || ext == ".pgm";
}

}  // namespace

DatasetIndex index_classes(const fs::path& root, const std::vector<ClassId>& ids) {
    DatasetIndex index;
    index.root = root;
    for (const auto& id : ids) {
        const fs::path dir = root / id;
        if (!fs::is_directory(dir)) throw IngestionError("missing class directory for class " + id + ": " + dir.string());
        ClassImages cls{id, {}};
        std::vector<std::string> files;
        for (const auto& entry : fs::directory_iterator(dir))
            if (entry.is_regular_file() && is_image_file(entry.path()))
                files.push_back(fs::relative(entry.path(), root).generic_string());
        std::sort(files.begin(), files.end());
        for (auto& f : files) cls.images.push_back({std::move(f), {}, {}});
        index.classes.push_back(std::move(cls));
    }
    index.validate();
    return index;
}

DatasetSplits load_dataset(const fs::path& root, const fs::path& split_file) {
    if (!fs::is_directory(root)) throw IngestionError("dataset root " + root.string() + " is not a directory");
    DatasetSplits splits;
    splits.spec = SplitSpec::from_file(split_file);

    const auto listed = splits.spec.all();
    const std::set<ClassId> listed_set(listed.begin(), listed.end());
    for (const auto& entry : fs::directory_iterator(root)) {
        if (!entry.is_directory()) continue;
        const auto name = entry.path().filename().string();
        if (name.empty() || name.front() == '.') continue;
        if (!listed_set.count(name))
            throw ValidationError("class directory " + name + " is not assigned to any split partition");
    }
    splits.base = index_classes(root, splits.spec.base);
    splits.val = index_classes(root, splits.spec.val);
    splits.novel = index_classes(root, splits.spec.novel);
    return splits;
}

// ---------------------------------------------------------------------------
// Episodes

Episode sample_episode(const DatasetIndex& index, int n, int m, int q, std::uint64_t seed) {
    if (n < 1 || m < 1 || q < 1)
        throw SamplingError("episode sizes must be positive (n=" + std::to_string(n) + ", m=" + std::to_string(m) +
                            ", q=" + std::to_string(q) + ")");
    const std::size_t need = static_cast<std::size_t>(m + q);
    std::vector<std::size_t> eligible;
    for (std::size_t c = 0; c < index.classes.size(); ++c)
        if (index.classes[c].images.size() >= need) eligible.push_back(c);
    if (eligible.size() < static_cast<std::size_t>(n))
        throw SamplingError("need " + std::to_string(n) + " classes with at least " + std::to_string(need) +
                            " images, index has " + std::to_string(eligible.size()) + " of " +
                            std::to_string(index.classes.size()));

    Rng rng(seed);
    std::shuffle(eligible.begin(), eligible.end(), rng);
    Episode ep;
    ep.n = n;
    ep.m = m;
    ep.q = q;
    for (int label = 0; label < n; ++label) {
        const std::size_t c = eligible[static_cast<std::size_t>(label)];
        ep.classes.push_back(index.classes[c].id);
        std::vector<std::size_t> order(index.classes[c].images.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        for (int i = 0; i < m; ++i) ep.support.push_back({c, order[static_cast<std::size_t>(i)], label});
        for (int i = 0; i < q; ++i) ep.query.push_back({c, order[static_cast<std::size_t>(m + i)], label});
    }
    return ep;
}

void check_episode(const Episode& ep) {
    const auto n = static_cast<std::size_t>(ep.n);
    if (ep.support.size() != n * static_cast<std::size_t>(ep.m))
        throw ValidationError("support size " + std::to_string(ep.support.size()) + " != n*m");
    if (ep.query.size() != n * static_cast<std::size_t>(ep.q))
        throw ValidationError("query size " + std::to_string(ep.query.size()) + " != n*q");
    if (ep.classes.size() != n) throw ValidationError("episode lists " + std::to_string(ep.classes.size()) + " classes");
    std::vector<int> s_count(n), q_count(n);
    std::set<std::pair<std::size_t, std::size_t>> support_ids;
    for (const auto& it : ep.support) {
        if (it.label < 0 || it.label >= ep.n) throw ValidationError("support label out of range");
        ++s_count[static_cast<std::size_t>(it.label)];
        if (!support_ids.insert({it.class_index, it.image_index}).second)
            throw ValidationError("duplicate support image");
    }
    std::set<std::pair<std::size_t, std::size_t>> query_ids;
    for (const auto& it : ep.query) {
        if (it.label < 0 || it.label >= ep.n) throw ValidationError("query label out of range");
        ++q_count[static_cast<std::size_t>(it.label)];
        if (support_ids.count({it.class_index, it.image_index}))
            throw ValidationError("image appears in both support and query");
        if (!query_ids.insert({it.class_index, it.image_index}).second) throw ValidationError("duplicate query image");
    }
    for (std::size_t c = 0; c < n; ++c)
        if (s_count[c] != ep.m || q_count[c] != ep.q)
            throw ValidationError("label " + std::to_string(c) + " is unbalanced");
}

nlohmann::json episode_manifest(const Episode& ep, const DatasetIndex& index) {
    auto items = [&](const std::vector<EpisodeItem>& list) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& it : list)
            arr.push_back({{"label", it.label},
                           {"class", index.classes[it.class_index].id},
                           {"image", index.classes[it.class_index].images[it.image_index].path}});
        return arr;
    };
    return {{"n", ep.n}, {"m", ep.m}, {"q", ep.q}, {"classes", ep.classes},
            {"support", items(ep.support)}, {"query", items(ep.query)}};
}

// ---------------------------------------------------------------------------

const Image<float>& ImageStore::get(const fs::path& path) {
    const std::string key = path.string();
    {
        std::lock_guard lock(mutex_);
        if (auto it = cache_.find(key); it != cache_.end()) return *it->second;
    }
    auto img = std::make_unique<Image<float>>(read_image(path));
    if (resolution_ > 0) *img = resize_bilinear(*img, resolution_, resolution_);
    std::lock_guard lock(mutex_);
    auto [it, inserted] = cache_.emplace(key, std::move(img));
    return *it->second;
}

}  // namespace metairnet
