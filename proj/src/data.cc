#include "mmbert/data.h"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "mmbert/error.h"
#include "mmbert/random.h"
#include "mmbert/tokenizer.h"
#include "mmbert/vision.h"

namespace mmbert {
namespace {

constexpr std::size_t kMaxMessages = 10;

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    out.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

// Calls parse(fields, problem) for each data line; parse returns false and
// sets problem for malformed lines.
template <typename Parse>
LoadSummary read_tsv(const std::filesystem::path& path, Parse parse) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::kIo, "cannot open " + path.string());
  LoadSummary summary;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty() || line.front() == '#') continue;
    ++summary.lines;
    std::string problem;
    if (!parse(split_tabs(line), problem, summary)) {
      ++summary.malformed;
      if (summary.messages.size() < kMaxMessages) {
        summary.messages.push_back(path.string() + ":" + std::to_string(number) + ": " + problem);
      }
    }
  }
  if (summary.malformed * 100 > summary.lines) {
    std::string msg = path.string() + ": " + std::to_string(summary.malformed) + " of " +
                      std::to_string(summary.lines) + " lines malformed (limit 1%)";
    for (const std::string& m : summary.messages) msg += "\n  " + m;
    fail(ErrorKind::kData, msg);
  }
  return summary;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& image) {
  std::filesystem::path p(image);
  if (p.is_relative()) p = base / p;
  return p.lexically_normal();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorKind::kIo, "cannot write " + path.string());
  out << text;
  require(out.good(), ErrorKind::kIo, "failed writing " + path.string());
}

struct RenderedImage {
  Image image;
  Box box;
  std::size_t shape = 0, color = 0, plane = 0, quadrant = 0;
};

const std::vector<std::string> kRenderableShapes = {"circle", "square", "cross"};
const std::vector<std::string> kRenderablePlanes = {"axial", "sagittal", "coronal"};
const std::vector<std::string> kRenderableColors = {"red", "green", "blue", "yellow", "magenta", "cyan"};
constexpr std::array<std::array<float, 3>, 6> kPalette = {{
    {0.90f, 0.15f, 0.15f},
    {0.15f, 0.85f, 0.20f},
    {0.20f, 0.30f, 0.95f},
    {0.90f, 0.85f, 0.15f},
    {0.85f, 0.20f, 0.85f},
    {0.15f, 0.85f, 0.85f},
}};

std::size_t renderable_index(const std::vector<std::string>& known, const std::string& name) {
  return static_cast<std::size_t>(std::find(known.begin(), known.end(), name) - known.begin());
}

void require_renderable(const std::vector<std::string>& values, const std::vector<std::string>& known,
                        const char* attribute) {
  std::vector<std::string> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  require(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(), ErrorKind::kConfig,
          std::string("synthetic spec: duplicate ") + attribute);
  for (const std::string& v : values) {
    require(renderable_index(known, v) < known.size(), ErrorKind::kConfig,
            std::string("synthetic spec: cannot render ") + attribute + " '" + v + "'");
  }
}

bool inside_shape(std::size_t shape, double dx, double dy, double half) {
  switch (shape) {
    case 0:
      return dx * dx + dy * dy <= half * half;
    case 1:
      return true;
    default:
      return std::abs(dx) <= half / 3.0 || std::abs(dy) <= half / 3.0;
  }
}

bool background_band(std::size_t plane, std::size_t y, std::size_t x) {
  switch (plane) {
    case 0:
      return (y / 4) % 2 == 0;
    case 1:
      return (x / 4) % 2 == 0;
    default:
      return ((x + y) / 4) % 2 == 0;
  }
}

RenderedImage render(const SyntheticSpec& spec, Rng& rng) {
  RenderedImage r;
  r.shape = rng.uniform_int(spec.shapes.size());
  r.color = rng.uniform_int(spec.colors.size());
  r.plane = rng.uniform_int(spec.planes.size());
  r.quadrant = rng.uniform_int(4);
  const std::size_t c = spec.canvas, s = spec.object_size, half = c / 2;
  const std::size_t slack = half - s;
  const std::size_t ox = (r.quadrant % 2) * half + 1 + rng.uniform_int(slack - 1);
  const std::size_t oy = (r.quadrant / 2) * half + 1 + rng.uniform_int(slack - 1);
  r.box = {ox, oy, ox + s, oy + s};
  const double brightness = rng.uniform(0.85, 1.0);
  const auto& rgb = kPalette[renderable_index(kRenderableColors, spec.colors[r.color])];
  const std::size_t shape_kind = renderable_index(kRenderableShapes, spec.shapes[r.shape]);
  const std::size_t plane_kind = renderable_index(kRenderablePlanes, spec.planes[r.plane]);

  r.image = Image(c, c);
  const double radius = static_cast<double>(s) / 2.0;
  const double cx = static_cast<double>(ox) + radius - 0.5;
  const double cy = static_cast<double>(oy) + radius - 0.5;
  for (std::size_t y = 0; y < c; ++y) {
    for (std::size_t x = 0; x < c; ++x) {
      const bool in_box = x >= ox && x < ox + s && y >= oy && y < oy + s;
      const bool on_object =
          in_box && inside_shape(shape_kind, static_cast<double>(x) - cx, static_cast<double>(y) - cy, radius);
      const float base = background_band(plane_kind, y, x) ? 0.30f : 0.12f;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double noise = 0.03 * rng.normal();
        const double v = on_object ? rgb[ch] * brightness + noise : base + noise;
        r.image.at(ch, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return r;
}

struct Question {
  std::size_t category;
  std::string text;
  std::string answer;
};

std::vector<Question> questions_for(const SyntheticSpec& spec, const RenderedImage& r, Rng& rng) {
  auto pick = [&](const char* a, const char* b) { return std::string(rng.uniform_int(2) ? b : a); };
  std::vector<Question> qs;
  qs.push_back({0, pick("what shape is shown?", "which shape appears in the image?"),
                spec.shapes[r.shape]});
  qs.push_back({1, pick("in which plane is this image taken?", "what plane is shown?"),
                spec.planes[r.plane]});
  qs.push_back({2, pick("what color is the object?", "what is the color of the shape?"),
                spec.colors[r.color]});
  // One true and one false yes/no question per image, so the answer cannot be
  // read off the question text.
  const std::size_t other = (r.shape + 1 + rng.uniform_int(spec.shapes.size() - 1)) % spec.shapes.size();
  const std::string stem = rng.uniform_int(2) ? "does the image show a " : "is this a ";
  Question yes{kYesNoCategory, stem + spec.shapes[r.shape] + "?", "yes"};
  Question no{kYesNoCategory, stem + spec.shapes[other] + "?", "no"};
  if (rng.uniform_int(2)) std::swap(yes, no);
  qs.push_back(std::move(yes));
  qs.push_back(std::move(no));
  return qs;
}

}  // namespace

std::optional<std::size_t> parse_category(std::string_view name) {
  std::string n = ascii_lower(trim(name));
  std::string compact;
  for (char c : n) {
    if (std::isalnum(static_cast<unsigned char>(c))) compact += c;
  }
  if (compact == "modality") return 0;
  if (compact == "plane") return 1;
  if (compact == "organ" || compact == "organsystem") return 2;
  if (compact == "abnormality") return 3;
  if (compact == "yesno") return kYesNoCategory;
  return std::nullopt;
}

std::string normalize_answer(std::string_view text) {
  std::string lowered = ascii_lower(text);
  std::string collapsed;
  bool pending_space = false;
  for (char c : lowered) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = !collapsed.empty();
      continue;
    }
    if (pending_space) collapsed += ' ';
    pending_space = false;
    collapsed += c;
  }
  std::size_t b = 0, e = collapsed.size();
  auto strip = [](char c) {
    return is_ascii_punct(static_cast<unsigned char>(c)) || c == ' ';
  };
  while (b < e && strip(collapsed[b])) ++b;
  while (e > b && strip(collapsed[e - 1])) --e;
  return collapsed.substr(b, e - b);
}

CaptionCorpus load_caption_corpus(const std::filesystem::path& path) {
  CaptionCorpus corpus;
  const auto base = path.parent_path();
  corpus.summary = read_tsv(path, [&](const std::vector<std::string>& f, std::string& problem,
                                      LoadSummary& summary) {
    if (f.size() != 2 && f.size() != 3) {
      problem = "expected 3 tab-separated columns, found " + std::to_string(f.size());
      return false;
    }
    CaptionRecord rec;
    const std::string image = trim(f[0]);
    rec.caption = trim(f[1]);
    if (image.empty() || rec.caption.empty()) {
      problem = "empty image path or caption";
      return false;
    }
    rec.image = resolve(base, image);
    const std::string caption_lower = ascii_lower(rec.caption);
    if (f.size() == 3) {
      std::stringstream ss(f[2]);
      std::string kw;
      while (std::getline(ss, kw, ';')) {
        kw = trim(kw);
        if (kw.empty()) continue;
        if (caption_lower.find(ascii_lower(kw)) == std::string::npos) {
          ++summary.dropped_keywords;
          continue;
        }
        rec.keywords.push_back(kw);
      }
    }
    corpus.records.push_back(std::move(rec));
    return true;
  });
  return corpus;
}

VqaDataset load_vqa_dataset(const std::filesystem::path& path) {
  VqaDataset ds;
  const auto base = path.parent_path();
  ds.summary = read_tsv(path, [&](const std::vector<std::string>& f, std::string& problem,
                                  LoadSummary&) {
    if (f.size() != 4) {
      problem = "expected 4 tab-separated columns, found " + std::to_string(f.size());
      return false;
    }
    VqaRecord rec;
    const std::string image = trim(f[0]);
    const auto category = parse_category(f[1]);
    rec.question = trim(f[2]);
    rec.answer = trim(f[3]);
    if (image.empty() || rec.question.empty() || normalize_answer(rec.answer).empty()) {
      problem = "empty image path, question or answer";
      return false;
    }
    if (!category) {
      problem = "unknown category '" + f[1] + "'";
      return false;
    }
    rec.image = resolve(base, image);
    const std::string norm = normalize_answer(rec.answer);
    rec.category = (norm == "yes" || norm == "no") ? kYesNoCategory : *category;
    ds.records.push_back(std::move(rec));
    return true;
  });
  return ds;
}

AnswerSpace AnswerSpace::build(std::span<const VqaRecord> records, std::size_t min_count) {
  require(!records.empty(), ErrorKind::kData, "answer space: no records");
  std::map<std::string, std::size_t> counts;
  for (const VqaRecord& r : records) ++counts[normalize_answer(r.answer)];
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [answer, count] : counts) {
    if (count >= min_count) kept.emplace_back(answer, count);
  }
  std::stable_sort(kept.begin(), kept.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> answers;
  for (auto& [answer, count] : kept) answers.push_back(answer);
  require(!answers.empty(), ErrorKind::kData,
          "answer space: no answer occurs at least " + std::to_string(min_count) + " times");
  return from_answers(std::move(answers));
}

AnswerSpace AnswerSpace::from_answers(std::vector<std::string> answers) {
  AnswerSpace space;
  for (std::string& a : answers) {
    require(!a.empty() && normalize_answer(a) == a, ErrorKind::kData,
            "answer space: answer '" + a + "' is not normalized");
    require(space.index_.emplace(a, space.answers_.size()).second, ErrorKind::kData,
            "answer space: duplicate answer '" + a + "'");
    space.answers_.push_back(std::move(a));
  }
  return space;
}

const std::string& AnswerSpace::answer(std::size_t id) const {
  require(id < answers_.size(), ErrorKind::kContract, "answer id " + std::to_string(id) + " out of range");
  return answers_[id];
}

std::optional<std::size_t> AnswerSpace::find(std::string_view answer) const {
  auto it = index_.find(normalize_answer(answer));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

void SyntheticSpec::validate() const {
  require(shapes.size() >= 2 && colors.size() >= 2 && planes.size() >= 2, ErrorKind::kConfig,
          "synthetic spec: every attribute needs at least 2 values");
  require_renderable(shapes, kRenderableShapes, "shape");
  require_renderable(colors, kRenderableColors, "color");
  require_renderable(planes, kRenderablePlanes, "plane");
  require(canvas >= 16 && object_size >= 4 && object_size + 4 <= canvas / 2, ErrorKind::kConfig,
          "synthetic spec: object must fit inside a quadrant with a margin");
  require(pretrain_train > 0 && vqa_train > 0, ErrorKind::kConfig,
          "synthetic spec: training splits must be non-empty");
}

double text_only_ceiling(const SyntheticSpec& spec) {
  spec.validate();
  const double slots[] = {1.0 / static_cast<double>(spec.colors.size()),
                          1.0 / static_cast<double>(spec.shapes.size()),
                          1.0 / static_cast<double>(spec.planes.size())};
  return (slots[0] + slots[1] + slots[2]) / 3.0;
}

SyntheticLayout SyntheticLayout::under(const std::filesystem::path& root) {
  SyntheticLayout l;
  l.root = root;
  l.captions_train = root / "captions_train.tsv";
  l.captions_val = root / "captions_val.tsv";
  l.captions_test = root / "captions_test.tsv";
  l.vqa_train = root / "vqa_train.tsv";
  l.vqa_val = root / "vqa_val.tsv";
  l.vqa_test = root / "vqa_test.tsv";
  l.boxes = root / "boxes.tsv";
  return l;
}

SyntheticLayout gen_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir) {
  spec.validate();
  const SyntheticLayout layout = SyntheticLayout::under(out_dir);
  std::filesystem::create_directories(out_dir / "images");

  struct Split {
    std::size_t count;
    bool vqa;
    std::filesystem::path file;
  };
  const Split splits[] = {
      {spec.pretrain_train, false, layout.captions_train}, {spec.pretrain_val, false, layout.captions_val},
      {spec.pretrain_test, false, layout.captions_test},   {spec.vqa_train, true, layout.vqa_train},
      {spec.vqa_val, true, layout.vqa_val},                {spec.vqa_test, true, layout.vqa_test},
  };
  std::string boxes = "# image_path\tx0\ty0\tx1\ty1\n";
  std::size_t next_id = 0;
  for (const Split& split : splits) {
    std::string tsv = split.vqa ? "# image_path\tcategory\tquestion\tanswer\n"
                                : "# image_path\tcaption\tkeywords\n";
    for (std::size_t i = 0; i < split.count; ++i, ++next_id) {
      Rng rng(Rng::derive(spec.seed, next_id));
      RenderedImage r = render(spec, rng);
      char name[32];
      std::snprintf(name, sizeof(name), "images/img_%06zu.ppm", next_id);
      write_ppm(r.image, out_dir / name);
      boxes += std::string(name) + "\t" + std::to_string(r.box.x0) + "\t" + std::to_string(r.box.y0) +
               "\t" + std::to_string(r.box.x1) + "\t" + std::to_string(r.box.y1) + "\n";
      if (split.vqa) {
        for (const Question& q : questions_for(spec, r, rng)) {
          tsv += std::string(name) + "\t" + std::string(kCategoryNames[q.category]) + "\t" + q.text +
                 "\t" + q.answer + "\n";
        }
      } else {
        const std::string& color = spec.colors[r.color];
        const std::string& shape = spec.shapes[r.shape];
        const std::string& plane = spec.planes[r.plane];
        tsv += std::string(name) + "\ta " + color + " " + shape + " in the " + plane + " plane\t" +
               color + ";" + shape + ";" + plane + "\n";
      }
    }
    write_text(split.file, tsv);
  }
  write_text(layout.boxes, boxes);
  return layout;
}

std::unordered_map<std::string, Box> load_boxes(const std::filesystem::path& path) {
  std::unordered_map<std::string, Box> out;
  const auto base = path.parent_path();
  read_tsv(path, [&](const std::vector<std::string>& f, std::string& problem, LoadSummary&) {
    if (f.size() != 5) {
      problem = "expected 5 columns";
      return false;
    }
    try {
      Box b{std::stoul(f[1]), std::stoul(f[2]), std::stoul(f[3]), std::stoul(f[4])};
      if (b.x1 <= b.x0 || b.y1 <= b.y0) {
        problem = "empty box";
        return false;
      }
      out[resolve(base, trim(f[0])).string()] = b;
    } catch (const std::exception&) {
      problem = "non-numeric box coordinate";
      return false;
    }
    return true;
  });
  return out;
}

}  // namespace mmbert
