#include "dphoi/data.hpp"

#include "dphoi/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace dphoi {

std::string_view to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::detection: return "detection";
    case DatasetKind::action_image: return "action_image";
    case DatasetKind::action_video: return "action_video";
    case DatasetKind::caption: return "caption";
  }
  return "detection";
}

DatasetKind dataset_kind_from_string(std::string_view name) {
  if (name == "detection") return DatasetKind::detection;
  if (name == "action_image") return DatasetKind::action_image;
  if (name == "action_video") return DatasetKind::action_video;
  if (name == "caption") return DatasetKind::caption;
  throw DataError("unknown dataset kind '" + std::string(name) + "'");
}

KindGroup group_of(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::detection: return KindGroup::detection;
    case DatasetKind::action_image:
    case DatasetKind::action_video: return KindGroup::action;
    case DatasetKind::caption: return KindGroup::caption;
  }
  return KindGroup::detection;
}

std::string_view to_string(KindGroup group) {
  switch (group) {
    case KindGroup::detection: return "detection";
    case KindGroup::action: return "action";
    case KindGroup::caption: return "caption";
  }
  return "detection";
}

std::vector<bool> DatasetSpec::verb_mask(int num_verb_classes) const {
  std::vector<bool> mask(static_cast<std::size_t>(num_verb_classes), false);
  for (int v : verb_class_ids) {
    if (v >= 0 && v < num_verb_classes) mask[static_cast<std::size_t>(v)] = true;
  }
  return mask;
}

void to_json(nlohmann::json& j, const DatasetSpec& d) {
  j = nlohmann::json{{"name", d.name},
                     {"kind", std::string(to_string(d.kind))},
                     {"verb_class_ids", d.verb_class_ids},
                     {"person_class_id", d.person_class_id},
                     {"sampling_weight", d.sampling_weight}};
}

void from_json(const nlohmann::json& j, DatasetSpec& d) {
  d.name = j.at("name").get<std::string>();
  d.kind = dataset_kind_from_string(j.at("kind").get<std::string>());
  d.verb_class_ids = j.value("verb_class_ids", std::vector<int>{});
  d.person_class_id = j.value("person_class_id", 0);
  d.sampling_weight = j.value("sampling_weight", 1.0);
}

void validate_datasets(const std::vector<DatasetSpec>& specs, int num_verb_classes, bool require_full_cover) {
  std::vector<std::string> problems;
  std::set<std::string> names;
  std::vector<bool> covered(static_cast<std::size_t>(std::max(num_verb_classes, 0)), false);
  bool any_action = false;
  for (const auto& d : specs) {
    if (d.name.empty()) problems.emplace_back("dataset with an empty name");
    if (!names.insert(d.name).second) problems.push_back("duplicate dataset name '" + d.name + "'");
    if (!(d.sampling_weight > 0.0)) problems.push_back("dataset '" + d.name + "': sampling_weight must be positive");
    const bool action = group_of(d.kind) == KindGroup::action;
    any_action = any_action || action;
    if (action && d.verb_class_ids.empty()) problems.push_back("action dataset '" + d.name + "' declares no verb classes");
    if (!action && !d.verb_class_ids.empty()) {
      problems.push_back("dataset '" + d.name + "' is not an action dataset but declares verb classes");
    }
    std::set<int> seen;
    for (int v : d.verb_class_ids) {
      if (v < 0 || v >= num_verb_classes) {
        problems.push_back("dataset '" + d.name + "': verb id " + std::to_string(v) + " outside [0, " +
                           std::to_string(num_verb_classes) + ")");
      } else {
        covered[static_cast<std::size_t>(v)] = true;
      }
      if (!seen.insert(v).second) problems.push_back("dataset '" + d.name + "': verb id " + std::to_string(v) + " repeated");
    }
    if (d.person_class_id < 0) problems.push_back("dataset '" + d.name + "': person_class_id must be non-negative");
  }
  if (require_full_cover && any_action) {
    for (std::size_t v = 0; v < covered.size(); ++v) {
      if (!covered[v]) problems.push_back("verb id " + std::to_string(v) + " belongs to no action dataset");
    }
  }
  if (!problems.empty()) {
    std::string msg = "invalid dataset declarations:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
}

// ---- synthetic data ----

namespace {

constexpr double kBackground = 0.2;

const std::array<std::array<double, 3>, 8> kObjectPalette{{
    {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}, {1.0, 1.0, 0.0}, {0.0, 1.0, 1.0},
    {1.0, 0.0, 1.0}, {1.0, 0.5, 0.0}, {0.5, 0.0, 1.0}, {0.5, 1.0, 0.5},
}};

// Disjoint from the object colors.
const std::array<std::array<double, 3>, 8> kVerbPalette{{
    {1.0, 1.0, 1.0}, {0.0, 0.0, 0.0}, {0.55, 0.55, 0.55}, {0.0, 0.0, 0.4},
    {0.0, 0.4, 0.0}, {0.4, 0.2, 0.0}, {0.0, 0.4, 0.4}, {0.4, 0.4, 0.0},
}};

std::array<double, 3> hashed_color(std::uint64_t key) {
  std::mt19937_64 g(key * 0x9E3779B97F4A7C15ULL + 17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return {u(g), u(g), u(g)};
}

struct PixelBox {
  int x0, y0, x1, y1;  // half-open

  [[nodiscard]] bool overlaps(const PixelBox& o) const {
    return x0 < o.x1 && o.x0 < x1 && y0 < o.y1 && o.y0 < y1;
  }
};

Image blank(const SyntheticCanvas& canvas) {
  if (canvas.height < 16 || canvas.width < 16) throw ConfigError("synthetic canvas must be at least 16x16");
  Image img(canvas.height, canvas.width, 3);
  std::fill(img.pixels.begin(), img.pixels.end(), kBackground);
  return img;
}

void fill(Image& img, const PixelBox& b, const std::array<double, 3>& color) {
  for (int y = b.y0; y < b.y1; ++y) {
    for (int x = b.x0; x < b.x1; ++x) {
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = color[static_cast<std::size_t>(c)];
    }
  }
}

// Central third of a person box.
void paint_glyph(Image& img, const PixelBox& b, int verb) {
  const int w = b.x1 - b.x0;
  const int h = b.y1 - b.y0;
  const PixelBox g{b.x0 + w / 3, b.y0 + h / 3, b.x1 - w / 3, b.y1 - h / 3};
  fill(img, g, verb_color(verb));
}

std::array<double, 4> to_cxcywh(const PixelBox& b, const SyntheticCanvas& canvas) {
  const double W = canvas.width;
  const double H = canvas.height;
  return {(b.x0 + b.x1) / (2.0 * W), (b.y0 + b.y1) / (2.0 * H), (b.x1 - b.x0) / W, (b.y1 - b.y0) / H};
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

std::optional<PixelBox> place(std::mt19937_64& rng, const SyntheticCanvas& canvas, int min_w, int max_w,
                              int min_h, int max_h, const std::vector<PixelBox>& taken) {
  for (int attempt = 0; attempt < 64; ++attempt) {
    const int w = uniform_int(rng, min_w, max_w);
    const int h = uniform_int(rng, min_h, max_h);
    const int x0 = uniform_int(rng, 0, canvas.width - w);
    const int y0 = uniform_int(rng, 0, canvas.height - h);
    const PixelBox b{x0, y0, x0 + w, y0 + h};
    if (std::none_of(taken.begin(), taken.end(), [&](const PixelBox& t) { return t.overlaps(b); })) return b;
  }
  return std::nullopt;
}

// Persons share one size range across generators.
std::optional<PixelBox> place_person(std::mt19937_64& rng, const SyntheticCanvas& canvas,
                                     const std::vector<PixelBox>& taken) {
  return place(rng, canvas, canvas.width / 4, canvas.width / 2, canvas.height / 3, 2 * canvas.height / 3, taken);
}

int random_non_person_class(std::mt19937_64& rng, int num_classes, int person) {
  if (num_classes < 2) return person;
  int c = uniform_int(rng, 0, num_classes - 2);
  return c >= person ? c + 1 : c;
}

std::string padded_id(std::string_view prefix, int i) {
  std::ostringstream s;
  s << prefix << '-';
  s.width(5);
  s.fill('0');
  s << i;
  return s.str();
}

void append_box(Record& r, const PixelBox& b, int label, const SyntheticCanvas& canvas) {
  const auto box = to_cxcywh(b, canvas);
  const Index n = r.boxes.rows();
  r.boxes.conservativeResize(n + 1, 4);
  for (int k = 0; k < 4; ++k) r.boxes(n, k) = box[static_cast<std::size_t>(k)];
  r.labels.push_back(label);
}

}  // namespace

std::array<double, 3> class_color(int object_class, int person_class) {
  if (object_class == person_class) return {1.0, 0.0, 0.0};
  const int slot = object_class > person_class ? object_class - 1 : object_class;
  if (slot >= 0 && slot < static_cast<int>(kObjectPalette.size())) return kObjectPalette[static_cast<std::size_t>(slot)];
  return hashed_color(static_cast<std::uint64_t>(object_class) + 1000);
}

std::array<double, 3> verb_color(int verb) {
  if (verb >= 0 && verb < static_cast<int>(kVerbPalette.size())) return kVerbPalette[static_cast<std::size_t>(verb)];
  return hashed_color(static_cast<std::uint64_t>(verb) + 5000);
}

std::vector<Record> generate_synthetic_detection(int n_images, const SyntheticDetectionOptions& o,
                                                 std::uint64_t seed) {
  if (o.min_boxes < 0 || o.max_boxes < o.min_boxes) throw ConfigError("invalid synthetic box count range");
  if (o.num_object_classes < 1) throw ConfigError("synthetic detection needs at least one class");
  std::mt19937_64 rng(seed);
  const auto& cv = o.canvas;
  std::vector<Record> out;
  for (int i = 0; i < n_images; ++i) {
    Record r;
    r.id = padded_id(o.dataset, i);
    r.dataset = o.dataset;
    r.kind = DatasetKind::detection;
    Image img = blank(cv);
    std::vector<PixelBox> taken;
    const int n_boxes = uniform_int(rng, o.min_boxes, o.max_boxes);
    for (int k = 0; k < n_boxes; ++k) {
      // The first box is a person, half of the rest are.
      const int label = k == 0 || uniform_int(rng, 0, 1) == 0 ? o.person_class_id
                                                    : random_non_person_class(rng, o.num_object_classes, o.person_class_id);
      const bool is_person = label == o.person_class_id;
      const auto b = is_person ? place_person(rng, cv, taken)
                               : place(rng, cv, cv.width / 4, cv.width / 2, cv.height / 4, cv.height / 2, taken);
      if (!b) continue;
      taken.push_back(*b);
      fill(img, *b, class_color(label, o.person_class_id));
      // Persons always carry some action glyph so they look like the
      // persons in action data.
      if (label == o.person_class_id) paint_glyph(img, *b, uniform_int(rng, 0, static_cast<int>(kVerbPalette.size()) - 1));
      append_box(r, *b, label, cv);
    }
    r.frames.push_back(std::move(img));
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<Record> generate_synthetic_actions(int n_samples, const SyntheticActionOptions& o, std::uint64_t seed) {
  if (o.verb_classes.empty()) throw ConfigError("synthetic actions need at least one verb class");
  if (o.kind != DatasetKind::action_image && o.kind != DatasetKind::action_video) {
    throw ConfigError("synthetic actions must be action_image or action_video");
  }
  if (o.kind == DatasetKind::action_video && o.num_frames < 1) throw ConfigError("video needs at least one frame");
  std::mt19937_64 rng(seed);
  const auto& cv = o.canvas;
  const int n_frames = o.kind == DatasetKind::action_video ? o.num_frames : 1;
  std::vector<Record> out;
  for (int i = 0; i < n_samples; ++i) {
    Record r;
    r.id = padded_id(o.dataset, i);
    r.dataset = o.dataset;
    r.kind = o.kind;
    const int verb = o.verb_classes[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(o.verb_classes.size()) - 1))];
    r.verbs = {verb};

    std::vector<PixelBox> taken;
    std::optional<PixelBox> person;
    if (!o.zero_persons) {
      // Leave two pixels of slack on each side for per-frame motion.
      SyntheticCanvas inner{cv.height - 4, cv.width - 4};
      person = place_person(rng, inner, taken);
      if (person) {
        *person = {person->x0 + 2, person->y0 + 2, person->x1 + 2, person->y1 + 2};
        taken.push_back(*person);
      }
    }
    const int obj_label = random_non_person_class(rng, o.num_object_classes, o.person_class_id);
    const auto obj = place(rng, cv, cv.width / 5, cv.width / 3, cv.height / 5, cv.height / 3, taken);

    for (int f = 0; f < n_frames; ++f) {
      Image img = blank(cv);
      if (obj) fill(img, *obj, class_color(obj_label, o.person_class_id));
      if (person) {
        const int dx = n_frames > 1 ? (f % 3) - 1 : 0;
        const int dy = n_frames > 1 ? ((f / 3) % 3) - 1 : 0;
        const PixelBox p{person->x0 + dx, person->y0 + dy, person->x1 + dx, person->y1 + dy};
        fill(img, p, class_color(o.person_class_id, o.person_class_id));
        paint_glyph(img, p, verb);
      }
      r.frames.push_back(std::move(img));
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<Record> generate_synthetic_captions(int n_samples, const SyntheticCaptionOptions& o, std::uint64_t seed) {
  static const std::array<std::string_view, 4> humans{"man", "woman", "boy", "girl"};
  static const std::array<std::string_view, 6> verbs{"rides", "holds", "kicks", "carries", "pushes", "watches"};
  static const std::array<std::string_view, 8> objects{"horse", "ball", "bike", "cup", "kite", "dog", "chair", "book"};
  std::mt19937_64 rng(seed);
  const auto& cv = o.canvas;
  std::vector<Record> out;
  for (int i = 0; i < n_samples; ++i) {
    Record r;
    r.id = padded_id(o.dataset, i);
    r.dataset = o.dataset;
    r.kind = DatasetKind::caption;
    const int h = uniform_int(rng, 0, static_cast<int>(humans.size()) - 1);
    const int v = uniform_int(rng, 0, static_cast<int>(verbs.size()) - 1);
    const int obj_label = random_non_person_class(rng, o.num_object_classes, o.person_class_id);
    const int obj_slot = (obj_label > o.person_class_id ? obj_label - 1 : obj_label) % static_cast<int>(objects.size());
    r.caption = "a " + std::string(humans[static_cast<std::size_t>(h)]) + " " +
                std::string(verbs[static_cast<std::size_t>(v)]) + " a " +
                std::string(objects[static_cast<std::size_t>(obj_slot)]) + ".";

    std::vector<PixelBox> taken;
    Image img = blank(cv);
    if (const auto person = place_person(rng, cv, taken)) {
      taken.push_back(*person);
      fill(img, *person, class_color(o.person_class_id, o.person_class_id));
      // Caption verbs live outside the action id space; offset their glyphs.
      paint_glyph(img, *person, 64 + v);
    }
    if (const auto obj = place(rng, cv, cv.width / 5, cv.width / 3, cv.height / 5, cv.height / 3, taken)) {
      fill(img, *obj, class_color(obj_label, o.person_class_id));
    }
    r.frames.push_back(std::move(img));
    r.triplets = parse_caption(r.caption, r.id);
    out.push_back(std::move(r));
  }
  return out;
}

// ---- images ----

Image resize_nearest(const Image& image, int height, int width) {
  if (height <= 0 || width <= 0) throw ConfigError("resize target must be positive");
  Image out(height, width, image.channels);
  for (int y = 0; y < height; ++y) {
    const int sy = std::min(image.height - 1, static_cast<int>((static_cast<long long>(y) * image.height) / height));
    for (int x = 0; x < width; ++x) {
      const int sx = std::min(image.width - 1, static_cast<int>((static_cast<long long>(x) * image.width) / width));
      for (int c = 0; c < image.channels; ++c) out.at(y, x, c) = image.at(sy, sx, c);
    }
  }
  return out;
}

namespace {

// Next header token, skipping whitespace and '#' comments.
std::string ppm_token(std::istream& in) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {}
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

}  // namespace

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read image " + path.string());
  const std::string magic = ppm_token(in);
  if (magic != "P6" && magic != "P3") throw DataError(path.string() + ": not a PPM image (P3/P6)");
  int width = 0, height = 0, maxval = 0;
  try {
    width = std::stoi(ppm_token(in));
    height = std::stoi(ppm_token(in));
    maxval = std::stoi(ppm_token(in));
  } catch (const std::exception&) {
    throw DataError(path.string() + ": malformed PPM header");
  }
  if (width <= 0 || height <= 0 || maxval <= 0 || maxval > 255) {
    throw DataError(path.string() + ": unsupported PPM dimensions or depth");
  }
  Image img(height, width, 3);
  for (auto& p : img.pixels) {
    int v = 0;
    if (magic == "P6") {
      const int ch = in.get();
      if (ch == EOF) throw DataError(path.string() + ": truncated PPM data");
      v = ch;
    } else {
      const std::string tok = ppm_token(in);
      if (tok.empty()) throw DataError(path.string() + ": truncated PPM data");
      v = std::stoi(tok);
    }
    p = static_cast<double>(v) / maxval;
  }
  return img;
}

void write_ppm(const Image& image, const std::filesystem::path& path) {
  if (image.channels != 3) throw DataError("write_ppm: need a 3-channel image");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write image " + path.string());
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  for (double p : image.pixels) {
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(p, 0.0, 1.0) * 255.0))));
  }
}

// ---- manifests ----

const DatasetSpec& Manifest::dataset(std::string_view name) const {
  for (const auto& d : datasets) {
    if (d.name == name) return d;
  }
  throw DataError("unknown dataset '" + std::string(name) + "'");
}

namespace {

constexpr std::string_view kNoTriplet = "no HOI triplet could be extracted from the caption";

nlohmann::json image_json(const Image& img) {
  return nlohmann::json{{"height", img.height}, {"width", img.width}, {"channels", img.channels}, {"pixels", img.pixels}};
}

Image image_from_json(const nlohmann::json& j) {
  Image img;
  img.height = j.at("height").get<int>();
  img.width = j.at("width").get<int>();
  img.channels = j.at("channels").get<int>();
  img.pixels = j.at("pixels").get<std::vector<double>>();
  if (img.height <= 0 || img.width <= 0 || img.channels <= 0) throw DataError("image dimensions must be positive");
  if (img.pixels.size() != static_cast<std::size_t>(img.height) * img.width * img.channels) {
    throw DataError("pixel count does not match height x width x channels");
  }
  if (std::any_of(img.pixels.begin(), img.pixels.end(), [](double v) { return !std::isfinite(v); })) {
    throw DataError("non-finite pixel value");
  }
  return img;
}

Record record_from_json(const nlohmann::json& j, const Manifest& m, const std::filesystem::path& base,
                        const IngestOptions& options) {
  Record r;
  r.id = j.at("id").get<std::string>();
  if (r.id.empty()) throw DataError("empty record id");
  r.dataset = j.at("dataset").get<std::string>();
  const DatasetSpec& spec = m.dataset(r.dataset);
  r.kind = dataset_kind_from_string(j.at("kind").get<std::string>());
  if (r.kind != spec.kind) {
    throw DataError("record kind '" + std::string(to_string(r.kind)) + "' does not match dataset '" + spec.name +
                    "' of kind '" + std::string(to_string(spec.kind)) + "'");
  }

  const bool video = r.kind == DatasetKind::action_video;
  if (j.contains("media")) {
    const auto& media = j.at("media");
    if (video != media.is_array()) throw DataError(video ? "video media must be a list of files" : "media must be a single file");
    r.media = video ? media.get<std::vector<std::string>>() : std::vector<std::string>{media.get<std::string>()};
    for (const auto& file : r.media) {
      const std::filesystem::path p = std::filesystem::path(file).is_absolute() ? std::filesystem::path(file) : base / file;
      r.frames.push_back(read_ppm(p));
    }
  } else if (video) {
    for (const auto& f : j.at("frames")) r.frames.push_back(image_from_json(f));
  } else {
    r.frames.push_back(image_from_json(j.at("image")));
  }
  if (r.frames.empty()) throw DataError("record has no frames");
  for (const auto& f : r.frames) {
    if (f.channels != r.frames.front().channels) throw DataError("frames disagree in channel count");
  }
  if (options.resize) {
    for (auto& f : r.frames) f = resize_nearest(f, options.resize->height, options.resize->width);
  }

  switch (r.kind) {
    case DatasetKind::detection: {
      const auto boxes = j.at("boxes").get<std::vector<std::vector<double>>>();
      r.labels = j.at("labels").get<std::vector<int>>();
      if (boxes.size() != r.labels.size()) throw DataError("boxes and labels differ in length");
      r.boxes.resize(static_cast<Index>(boxes.size()), 4);
      for (std::size_t i = 0; i < boxes.size(); ++i) {
        const auto& b = boxes[i];
        const std::string where = "box " + std::to_string(i);
        if (b.size() != 4) throw DataError(where + " must have 4 coordinates [cx, cy, w, h]");
        if (std::any_of(b.begin(), b.end(), [](double v) { return !std::isfinite(v); })) throw DataError(where + " is not finite");
        if (!(b[2] > 0.0) || !(b[3] > 0.0)) throw DataError(where + " has non-positive width or height");
        constexpr double tol = 1e-9;
        if (b[0] - b[2] / 2 < -tol || b[0] + b[2] / 2 > 1 + tol || b[1] - b[3] / 2 < -tol || b[1] + b[3] / 2 > 1 + tol) {
          throw DataError(where + " extends outside the unit square");
        }
        for (int k = 0; k < 4; ++k) r.boxes(static_cast<Index>(i), k) = b[static_cast<std::size_t>(k)];
        if (r.labels[i] < 0) throw DataError("negative class label");
      }
      break;
    }
    case DatasetKind::action_image:
    case DatasetKind::action_video: {
      r.verbs = j.at("verbs").get<std::vector<int>>();
      if (r.verbs.empty()) throw DataError("action record without verb labels");
      for (int v : r.verbs) {
        if (std::find(spec.verb_class_ids.begin(), spec.verb_class_ids.end(), v) == spec.verb_class_ids.end()) {
          throw DataError("verb id " + std::to_string(v) + " is outside the verb set of dataset '" + spec.name + "'");
        }
      }
      break;
    }
    case DatasetKind::caption: {
      r.caption = j.at("caption").get<std::string>();
      r.triplets = parse_caption(r.caption, r.id);
      break;
    }
  }
  return r;
}

}  // namespace

Manifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir, const IngestOptions& options) {
  Manifest m;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  std::vector<ManifestIssue> issues;
  std::set<std::string> ids;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!have_header) {
        if (j.value("format", std::string()) != "dphoi-manifest") throw DataError("first line must be the manifest header");
        if (j.value("version", 0) != Manifest::kVersion) {
          throw DataError("unsupported manifest version " + j.value("version", nlohmann::json()).dump());
        }
        m.datasets = j.at("datasets").get<std::vector<DatasetSpec>>();
        have_header = true;
        continue;
      }
      Record r = record_from_json(j, m, base_dir, options);
      if (!ids.insert(r.id).second) throw DataError("duplicate record id '" + r.id + "'");
      if (r.kind == DatasetKind::caption && r.triplets.empty()) {
        ++m.filtered[std::string(kNoTriplet)];
        continue;
      }
      m.records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      issues.push_back({line_no, e.what()});
    } catch (const Error& e) {
      issues.push_back({line_no, e.what()});
    }
    if (!have_header && !issues.empty()) break;
  }
  if (!have_header && issues.empty()) issues.push_back({line_no, "missing manifest header"});

  if (!issues.empty() && (!options.lenient || !have_header)) {
    std::string msg = "manifest has " + std::to_string(issues.size()) + " bad line(s):";
    for (const auto& i : issues) msg += "\n  line " + std::to_string(i.line) + ": " + i.message;
    throw DataError(msg);
  }
  m.issues = std::move(issues);
  return m;
}

Manifest ingest_manifest(const std::filesystem::path& path, const IngestOptions& options) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read manifest " + path.string());
  return parse_manifest(in, path.parent_path(), options);
}

void write_manifest(const Manifest& m, std::ostream& out) {
  nlohmann::json header{{"format", "dphoi-manifest"}, {"version", Manifest::kVersion}, {"datasets", m.datasets}};
  out << header.dump() << '\n';
  for (const auto& r : m.records) {
    nlohmann::json j;
    j["id"] = r.id;
    j["dataset"] = r.dataset;
    j["kind"] = std::string(to_string(r.kind));
    const bool video = r.kind == DatasetKind::action_video;
    if (!r.media.empty()) {
      j["media"] = video ? nlohmann::json(r.media) : nlohmann::json(r.media.front());
    } else if (video) {
      auto& frames = j["frames"] = nlohmann::json::array();
      for (const auto& f : r.frames) frames.push_back(image_json(f));
    } else {
      j["image"] = image_json(r.image());
    }
    switch (r.kind) {
      case DatasetKind::detection: {
        auto& boxes = j["boxes"] = nlohmann::json::array();
        for (Index i = 0; i < r.boxes.rows(); ++i) {
          boxes.push_back({r.boxes(i, 0), r.boxes(i, 1), r.boxes(i, 2), r.boxes(i, 3)});
        }
        j["labels"] = r.labels;
        break;
      }
      case DatasetKind::action_image:
      case DatasetKind::action_video: j["verbs"] = r.verbs; break;
      case DatasetKind::caption: j["caption"] = r.caption; break;
    }
    out << j.dump() << '\n';
  }
}

void write_manifest(const Manifest& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path.string());
  write_manifest(m, out);
}

// ---- batch composition ----

BatchPlan BatchPlan::parse(std::string_view text, int batch_size) {
  if (batch_size <= 0) throw ConfigError("batch size must be positive");
  BatchPlan p;
  p.batch_size = batch_size;
  std::vector<int> parts;
  std::string field;
  std::istringstream in{std::string(text)};
  while (std::getline(in, field, ':')) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(field, &used);
      if (used != field.size() || v < 0) throw ConfigError("");
      parts.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("batch ratio '" + std::string(text) + "' must be non-negative integers separated by ':'");
    }
  }
  if (parts.size() < 2 || parts.size() > 3) {
    throw ConfigError("batch ratio '" + std::string(text) + "' must be detection:action[:caption]");
  }
  p.ratio[KindGroup::detection] = parts[0];
  p.ratio[KindGroup::action] = parts[1];
  p.ratio[KindGroup::caption] = parts.size() == 3 ? parts[2] : 0;
  if (p.ratio_sum() == 0) throw ConfigError("batch ratio must have a positive entry");
  return p;
}

int BatchPlan::ratio_sum() const {
  int s = 0;
  for (const auto& [g, r] : ratio) s += r;
  return s;
}

std::string BatchPlan::ratio_text() const {
  auto get = [&](KindGroup g) {
    const auto it = ratio.find(g);
    return it == ratio.end() ? 0 : it->second;
  };
  return std::to_string(get(KindGroup::detection)) + ":" + std::to_string(get(KindGroup::action)) + ":" +
         std::to_string(get(KindGroup::caption));
}

void to_json(nlohmann::json& j, const BatchPlan& p) {
  j = nlohmann::json{{"batch_size", p.batch_size}, {"ratio", p.ratio_text()}};
}

void from_json(const nlohmann::json& j, BatchPlan& p) {
  p = BatchPlan::parse(j.at("ratio").get<std::string>(), j.at("batch_size").get<int>());
}

std::vector<int> apportion(int total, const std::vector<double>& weights, const std::vector<long long>& already,
                           long long total_so_far) {
  const std::size_t n = weights.size();
  if (already.size() != n) throw ShapeError("apportion: weights and counts differ in length");
  const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(wsum > 0.0)) throw ConfigError("apportion: weights must sum to a positive value");
  const auto after = static_cast<double>(total_so_far + total);
  std::vector<double> need(n);
  std::vector<int> out(n, 0);
  int assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double ideal = after * weights[i] / wsum;
    need[i] = ideal - static_cast<double>(already[i]);
    out[i] = std::max(0, static_cast<int>(std::floor(need[i] + 1e-9)));
    assigned += out[i];
  }
  while (assigned > total) {
    std::size_t worst = 0;
    for (std::size_t i = 1; i < n; ++i) {
      if (out[i] - need[i] > out[worst] - need[worst]) worst = i;
    }
    --out[worst];
    --assigned;
  }
  while (assigned < total) {
    std::size_t best = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (weights[i] <= 0.0) continue;
      if (best == n || need[i] - out[i] > need[best] - out[best] + 1e-12) best = i;
    }
    ++out[best];
    ++assigned;
  }
  return out;
}

BatchStream::BatchStream(std::vector<DatasetSpec> specs, std::vector<std::vector<const Record*>> records,
                         std::vector<std::pair<std::uint64_t, BatchPlan>> schedule, std::uint64_t seed)
    : specs_(std::move(specs)), records_(std::move(records)), schedule_(std::move(schedule)), rng_(seed) {
  if (specs_.size() != records_.size()) throw ShapeError("BatchStream: one record list per dataset");
  if (schedule_.empty() || schedule_.front().first != 0) throw ConfigError("batch plan schedule must start at step 0");
  if (!std::is_sorted(schedule_.begin(), schedule_.end(),
                      [](const auto& a, const auto& b) { return a.first < b.first; })) {
    throw ConfigError("batch plan schedule must be ordered by step");
  }
  for (const auto& [step, plan] : schedule_) {
    if (plan.batch_size <= 0) throw ConfigError("batch size must be positive");
    for (const auto& [group, ratio] : plan.ratio) {
      if (ratio <= 0) continue;
      bool found = false;
      for (std::size_t d = 0; d < specs_.size(); ++d) {
        found = found || (group_of(specs_[d].kind) == group && !records_[d].empty());
      }
      if (!found) {
        throw ConfigError("batch plan from step " + std::to_string(step) + " needs " + std::string(to_string(group)) +
                          " records but no such dataset has any");
      }
    }
  }
  order_.resize(specs_.size());
  cursor_.assign(specs_.size(), 0);
  dataset_given_.assign(specs_.size(), 0);
}

const BatchPlan& BatchStream::plan_at(std::uint64_t step) const {
  std::size_t idx = 0;
  for (std::size_t i = 0; i < schedule_.size(); ++i) {
    if (schedule_[i].first <= step) idx = i;
  }
  return schedule_[idx].second;
}

std::size_t BatchStream::draw(std::size_t d) {
  auto& order = order_[d];
  if (cursor_[d] >= order.size()) {
    order.resize(records_[d].size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng_);
    cursor_[d] = 0;
  }
  return order[cursor_[d]++];
}

Batch BatchStream::next() {
  std::size_t plan_idx = 0;
  for (std::size_t i = 0; i < schedule_.size(); ++i) {
    if (schedule_[i].first <= step_) plan_idx = i;
  }
  if (plan_idx != active_plan_) {
    active_plan_ = plan_idx;
    group_given_.clear();
    std::fill(dataset_given_.begin(), dataset_given_.end(), 0);
    slots_given_ = 0;
  }
  const BatchPlan& plan = schedule_[plan_idx].second;

  const std::vector<KindGroup> groups{KindGroup::detection, KindGroup::action, KindGroup::caption};
  std::vector<double> gw;
  std::vector<long long> gg;
  for (KindGroup g : groups) {
    const auto it = plan.ratio.find(g);
    gw.push_back(it == plan.ratio.end() ? 0.0 : it->second);
    gg.push_back(group_given_[g]);
  }
  const std::vector<int> per_group = apportion(plan.batch_size, gw, gg, slots_given_);

  Batch batch;
  batch.step = step_;
  batch.plan = plan;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    if (per_group[gi] == 0) continue;
    std::vector<std::size_t> members;
    std::vector<double> weights;
    std::vector<long long> given;
    for (std::size_t d = 0; d < specs_.size(); ++d) {
      if (group_of(specs_[d].kind) != groups[gi] || records_[d].empty()) continue;
      members.push_back(d);
      weights.push_back(specs_[d].sampling_weight);
      given.push_back(dataset_given_[d]);
    }
    const std::vector<int> per_dataset = apportion(per_group[gi], weights, given, group_given_[groups[gi]]);
    for (std::size_t k = 0; k < members.size(); ++k) {
      for (int c = 0; c < per_dataset[k]; ++c) batch.items.push_back({members[k], draw(members[k])});
      dataset_given_[members[k]] += per_dataset[k];
    }
    group_given_[groups[gi]] += per_group[gi];
  }
  slots_given_ += plan.batch_size;
  ++step_;
  return batch;
}

BatchStream make_batch_stream(const Manifest& manifest, std::vector<std::pair<std::uint64_t, BatchPlan>> schedule,
                              std::uint64_t seed) {
  std::vector<std::vector<const Record*>> grouped(manifest.datasets.size());
  for (const auto& r : manifest.records) {
    const auto it = std::find_if(manifest.datasets.begin(), manifest.datasets.end(),
                                 [&](const DatasetSpec& d) { return d.name == r.dataset; });
    if (it == manifest.datasets.end()) throw DataError("record '" + r.id + "' names unknown dataset '" + r.dataset + "'");
    grouped[static_cast<std::size_t>(it - manifest.datasets.begin())].push_back(&r);
  }
  return BatchStream(manifest.datasets, std::move(grouped), std::move(schedule), seed);
}

std::vector<int> sample_frame_indices(int num_frames, int n_f, std::mt19937_64& rng) {
  if (num_frames <= 0) throw DataError("video has no frames");
  if (n_f <= 0) throw ConfigError("number of sampled frames must be positive");
  std::vector<int> out;
  if (num_frames >= n_f) {
    std::vector<int> all(static_cast<std::size_t>(num_frames));
    std::iota(all.begin(), all.end(), 0);
    std::shuffle(all.begin(), all.end(), rng);
    out.assign(all.begin(), all.begin() + n_f);
  } else {
    std::uniform_int_distribution<int> pick(0, num_frames - 1);
    for (int i = 0; i < n_f; ++i) out.push_back(pick(rng));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace dphoi
