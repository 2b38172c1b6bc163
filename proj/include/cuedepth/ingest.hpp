#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cuedepth/cues.hpp"
#include "cuedepth/error.hpp"
#include "cuedepth/scene.hpp"
#include "cuedepth/serialize.hpp"
#include "cuedepth/tensor.hpp"

namespace cuedepth {

// ---------------------------------------------------------------------------
// Ingestion of externally produced segmentations: an instance-id raster,
// an appearance raster, a per-instance descriptor CSV and a class-id name
// CSV become a sample the cue builder accepts. No depth is attached.
// ---------------------------------------------------------------------------

struct InstanceDescriptor {
    int instance_id = 0;
    int class_id = 0; // external id, as written in the descriptor
    bool has_bbox = false;
    long u0 = 0, v0 = 0, w = 0, h = 0; // top-left pixel and pixel extents
};

struct IngestedSample {
    SceneSample sample; // depth_map stays empty (inference-only record)
    Catalog catalog;    // named classes, ids densified to 1..K
    std::vector<int> external_class_ids; // catalog id i+1 came from external id [i]
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    fields.push_back(cur);
    return fields;
}

inline long parse_csv_long(const std::string& field, const std::string& origin, std::size_t line_no) {
    std::size_t pos = 0;
    long v = 0;
    try {
        v = std::stol(field, &pos);
    } catch (const std::exception&) {
        throw ParseError(origin + " line " + std::to_string(line_no) + ": '" + field +
                         "' is not an integer");
    }
    if (pos != field.size()) {
        throw ParseError(origin + " line " + std::to_string(line_no) + ": '" + field +
                         "' is not an integer");
    }
    return v;
}

/// Lines of a text file with CRLF endings and trailing blank lines shed.
inline std::vector<std::string> read_csv_lines(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw PersistenceError("cannot open " + path.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    while (!lines.empty() && lines.back().empty()) lines.pop_back();
    return lines;
}

struct PixelRect {
    long u0 = 0, v0 = 0, w = 0, h = 0;
};

/// Tight pixel bounding box of one id in an id raster.
inline PixelRect raster_bbox(const Tensor& map, int id) {
    const std::size_t H = map.extent(0), W = map.extent(1);
    long umin = static_cast<long>(W), umax = -1, vmin = static_cast<long>(H), vmax = -1;
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
            if (static_cast<int>(map.at({y, x})) != id) continue;
            umin = std::min(umin, static_cast<long>(x));
            umax = std::max(umax, static_cast<long>(x));
            vmin = std::min(vmin, static_cast<long>(y));
            vmax = std::max(vmax, static_cast<long>(y));
        }
    }
    if (umax < 0) throw LookupError("raster_bbox: id " + std::to_string(id) + " not present");
    return {umin, vmin, umax - umin + 1, vmax - vmin + 1};
}

} // namespace detail

/// class_id,name rows; external ids must be positive and unique.
inline std::vector<std::pair<int, std::string>> load_class_names(const std::filesystem::path& path) {
    const std::vector<std::string> lines = detail::read_csv_lines(path);
    const std::string origin = path.string();
    if (lines.empty() || lines[0] != "class_id,name") {
        throw FormatError(origin + ": expected header 'class_id,name'");
    }
    std::vector<std::pair<int, std::string>> entries;
    std::set<int> seen;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const std::vector<std::string> f = detail::split_csv_line(lines[i]);
        if (f.size() != 2) {
            throw ParseError(origin + " line " + std::to_string(i + 1) + ": expected 2 fields, got " +
                             std::to_string(f.size()));
        }
        const long id = detail::parse_csv_long(f[0], origin, i + 1);
        if (id < 1) {
            throw ParseError(origin + " line " + std::to_string(i + 1) +
                             ": class id must be positive, got " + f[0]);
        }
        if (f[1].empty()) {
            throw ParseError(origin + " line " + std::to_string(i + 1) + ": empty class name");
        }
        if (!seen.insert(static_cast<int>(id)).second) {
            throw ParseError(origin + " line " + std::to_string(i + 1) + ": duplicate class id " + f[0]);
        }
        entries.emplace_back(static_cast<int>(id), f[1]);
    }
    return entries;
}

/// instance_id,class_id rows, optionally with a u0,v0,w,h pixel bbox.
inline std::vector<InstanceDescriptor> load_instance_descriptors(const std::filesystem::path& path) {
    const std::vector<std::string> lines = detail::read_csv_lines(path);
    const std::string origin = path.string();
    bool with_bbox = false;
    if (lines.empty()) throw FormatError(origin + ": empty descriptor file");
    if (lines[0] == "instance_id,class_id,u0,v0,w,h") {
        with_bbox = true;
    } else if (lines[0] != "instance_id,class_id") {
        throw FormatError(origin +
                          ": expected header 'instance_id,class_id' or 'instance_id,class_id,u0,v0,w,h'");
    }
    const std::size_t n_fields = with_bbox ? 6 : 2;
    std::vector<InstanceDescriptor> out;
    std::set<int> seen;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const std::vector<std::string> f = detail::split_csv_line(lines[i]);
        if (f.size() != n_fields) {
            throw ParseError(origin + " line " + std::to_string(i + 1) + ": expected " +
                             std::to_string(n_fields) + " fields, got " + std::to_string(f.size()));
        }
        InstanceDescriptor d;
        d.instance_id = static_cast<int>(detail::parse_csv_long(f[0], origin, i + 1));
        d.class_id = static_cast<int>(detail::parse_csv_long(f[1], origin, i + 1));
        if (d.instance_id < 1) {
            throw ParseError(origin + " line " + std::to_string(i + 1) +
                             ": instance id must be positive, got " + f[0]);
        }
        if (d.class_id < 1) {
            throw ParseError(origin + " line " + std::to_string(i + 1) +
                             ": class id must be positive, got " + f[1]);
        }
        if (!seen.insert(d.instance_id).second) {
            throw ParseError(origin + " line " + std::to_string(i + 1) + ": duplicate instance id " +
                             f[0]);
        }
        if (with_bbox) {
            d.has_bbox = true;
            d.u0 = detail::parse_csv_long(f[2], origin, i + 1);
            d.v0 = detail::parse_csv_long(f[3], origin, i + 1);
            d.w = detail::parse_csv_long(f[4], origin, i + 1);
            d.h = detail::parse_csv_long(f[5], origin, i + 1);
            if (d.u0 < 0 || d.v0 < 0 || d.w < 1 || d.h < 1) {
                throw ParseError(origin + " line " + std::to_string(i + 1) + ": bbox " +
                                 std::to_string(d.u0) + "," + std::to_string(d.v0) + "," +
                                 std::to_string(d.w) + "," + std::to_string(d.h) +
                                 " is not a valid pixel rectangle");
            }
        }
        out.push_back(d);
    }
    return out;
}

/// Builds a cue-ready sample from externally produced rasters. The
/// instance raster is a [H, W] tensor of integral ids (0 background), the
/// appearance raster [3, H, W]. Descriptor rows must cover every id in
/// the raster; descriptor bboxes, when given, must match the raster's
/// tight boxes so both area paths agree. Class ids are resolved through
/// the name CSV and densified into catalog positions.
inline IngestedSample ingest_external_sample(const std::filesystem::path& instance_raster_path,
                                             const std::filesystem::path& descriptor_path,
                                             const std::filesystem::path& appearance_path,
                                             const std::filesystem::path& class_names_path) {
    Tensor inst = load_tensor(instance_raster_path);
    if (inst.rank() != 2) {
        throw DimensionError("instance raster " + instance_raster_path.string() + " has shape " +
                             shape_str(inst.shape()) + ", expected [H, W]");
    }
    Tensor app = load_tensor(appearance_path);
    if (app.rank() != 3 || app.extent(0) != 3) {
        throw DimensionError("appearance raster " + appearance_path.string() + " has shape " +
                             shape_str(app.shape()) + ", expected [3, H, W]");
    }
    if (app.extent(1) != inst.extent(0) || app.extent(2) != inst.extent(1)) {
        throw DimensionError("appearance raster " + shape_str(app.shape()) +
                             " does not cover instance raster " + shape_str(inst.shape()));
    }
    for (std::size_t i = 0; i < inst.numel(); ++i) {
        const double v = inst[i];
        if (v < 0.0 || v != std::floor(v)) {
            throw FormatError("instance raster: value " + std::to_string(v) + " at flat index " +
                              std::to_string(i) + " is not a non-negative integer id");
        }
    }

    const std::vector<std::pair<int, std::string>> names = load_class_names(class_names_path);
    std::vector<InstanceDescriptor> descriptors = load_instance_descriptors(descriptor_path);

    // catalog positions follow ascending external class id, so one name
    // CSV yields the same densification for every ingested sample
    std::vector<std::pair<int, std::string>> ordered = names;
    std::sort(ordered.begin(), ordered.end());
    IngestedSample rec;
    std::map<int, int> dense_of;
    for (const auto& [ext_id, name] : ordered) {
        ObjectClass cls;
        cls.name = name;
        rec.catalog.classes.push_back(cls);
        rec.external_class_ids.push_back(ext_id);
        dense_of[ext_id] = static_cast<int>(rec.catalog.classes.size());
    }
    rec.catalog.validate();

    std::map<int, const InstanceDescriptor*> by_instance;
    for (InstanceDescriptor& d : descriptors) {
        if (dense_of.find(d.class_id) == dense_of.end()) {
            throw LookupError("instance " + std::to_string(d.instance_id) + ": class id " +
                              std::to_string(d.class_id) + " has no entry in " +
                              class_names_path.string());
        }
        by_instance[d.instance_id] = &d;
    }

    for (int iid : detail::present_ids(inst)) {
        const auto it = by_instance.find(iid);
        if (it == by_instance.end()) {
            throw ValidationError("instance raster id " + std::to_string(iid) +
                                  " is missing from the descriptor " + descriptor_path.string());
        }
        const InstanceDescriptor& d = *it->second;
        if (d.has_bbox) {
            const detail::PixelRect r = detail::raster_bbox(inst, iid);
            if (r.u0 != d.u0 || r.v0 != d.v0 || r.w != d.w || r.h != d.h) {
                throw ValidationError(
                    "instance " + std::to_string(iid) + ": descriptor bbox (" + std::to_string(d.u0) +
                    "," + std::to_string(d.v0) + "," + std::to_string(d.w) + "," + std::to_string(d.h) +
                    ") disagrees with the raster's tight bbox (" + std::to_string(r.u0) + "," +
                    std::to_string(r.v0) + "," + std::to_string(r.w) + "," + std::to_string(r.h) + ")");
            }
        }
    }

    const std::size_t H = inst.extent(0), W = inst.extent(1);
    rec.sample.instance_map = inst;
    rec.sample.appearance = app;
    rec.sample.semantic_map = Tensor::zeros({H, W});
    for (std::size_t i = 0; i < inst.numel(); ++i) {
        const int iid = static_cast<int>(inst[i]);
        if (iid > 0) {
            rec.sample.semantic_map[i] =
                static_cast<double>(dense_of.at(by_instance.at(iid)->class_id));
        }
    }
    rec.sample.camera.width_px = W;
    rec.sample.camera.height_px = H;
    return rec;
}

} // namespace cuedepth
