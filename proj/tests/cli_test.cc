#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "mmbert/cli.h"
#include "mmbert/vision.h"
#include "test_util.h"

using namespace mmbert;

namespace {

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  Result r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

std::string first_image(const std::filesystem::path& tsv) {
  std::ifstream in(tsv);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line[0] != '#') return (tsv.parent_path() / line.substr(0, line.find('\t'))).string();
  }
  return "";
}

const std::vector<std::string> kTinyModel = {"--hidden", "12", "--layers", "1", "--heads", "2",
                                             "--image_size", "32", "--widths", "2,2,2,2,2",
                                             "--max_text", "16", "--feature_mode", "spatial"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_CASE("usage errors") {
  Result r = run({});
  CHECK(r.code == cli::kExitUsage);
  CHECK(r.out.find("gen-synth") != std::string::npos);
  CHECK(run({"frobnicate"}).code == cli::kExitUsage);
  CHECK(run({"pretrain", "--no-such-key", "1"}).code == cli::kExitUsage);
  Result bad = run({"gen-synth", "--canvas", "big"});
  CHECK(bad.code == cli::kExitUsage);
  CHECK(bad.err.find("canvas") != std::string::npos);
}

TEST_CASE("help lists every key with its default") {
  for (const char* cmd : {"gen-synth", "build-vocab", "pretrain", "finetune", "evaluate", "predict", "attnmap"}) {
    Result r = run({cmd, "--help"});
    CHECK(r.code == cli::kExitOk);
    CHECK(r.out.find("--seed") != std::string::npos);
    CHECK(r.out.find("--config") != std::string::npos);
  }
  Result p = run({"pretrain", "--help"});
  CHECK(p.out.find("--lr TEXT [2e-05]") != std::string::npos);
  CHECK(p.out.find("--patience TEXT [5]") != std::string::npos);
  Result f = run({"finetune", "--help"});
  CHECK(f.out.find("--lr TEXT [0.0001]") != std::string::npos);
  CHECK(f.out.find("--patience TEXT [10]") != std::string::npos);
}

TEST_CASE("config files: flags win, unknown keys fail") {
  testing::TempDir dir("cli_cfg");
  write(dir / "a.cfg", "# synthetic\ncanvas = 32\nobject_size=8\nvqa_train = 9\n");
  Result r = run({"gen-synth", "--config", (dir / "a.cfg").string(), "--vqa_train", "2", "--pretrain_train",
                  "2", "--pretrain_val", "1", "--pretrain_test", "1", "--vqa_val", "1", "--vqa_test", "1",
                  "--out", (dir / "s").string()});
  CHECK(r.code == cli::kExitOk);
  CHECK(r.out.find("canvas = 32\n") != std::string::npos);
  CHECK(r.out.find("vqa_train = 2\n") != std::string::npos);
  CHECK(r.out.find("seed = 0\n") != std::string::npos);

  write(dir / "b.cfg", "canvas = 32\ncanvass = 3\n");
  Result u = run({"gen-synth", "--config", (dir / "b.cfg").string()});
  CHECK(u.code == cli::kExitUsage);
  CHECK(u.err.find("canvass") != std::string::npos);
  write(dir / "c.cfg", "canvas 32\n");
  CHECK(run({"gen-synth", "--config", (dir / "c.cfg").string()}).code == cli::kExitUsage);
  write(dir / "d.cfg", "canvas = 32\ncanvas = 64\n");
  CHECK(run({"gen-synth", "--config", (dir / "d.cfg").string()}).code == cli::kExitUsage);
  CHECK(run({"gen-synth", "--config", (dir / "missing.cfg").string()}).code == cli::kExitData);
}

TEST_CASE("MMVQA_THREADS must be a positive integer") {
  setenv("MMVQA_THREADS", "zero", 1);
  CHECK(run({"predict"}).code == cli::kExitUsage);
  setenv("MMVQA_THREADS", "2", 1);
  Result r = run({"predict", "--ckpt", "/nonexistent.ckpt"});
  CHECK(r.out.find("# threads = 2") != std::string::npos);
  CHECK(r.code == cli::kExitData);
  CHECK(r.err.find("/nonexistent.ckpt") != std::string::npos);
  unsetenv("MMVQA_THREADS");
}

TEST_CASE("pipeline end to end, twice, byte-identical") {
  testing::TempDir dir("cli_pipe");
  auto p = [&](const std::string& name) { return (dir / name).string(); };
  const std::vector<std::string> synth = {"gen-synth", "--out", p("s"), "--canvas", "32", "--object_size", "8",
                                          "--pretrain_train", "8", "--pretrain_val", "2", "--pretrain_test", "2",
                                          "--vqa_train", "4", "--vqa_val", "2", "--vqa_test", "2"};
  REQUIRE(run(synth).code == 0);
  REQUIRE(run({"build-vocab", "--captions", p("s/captions_train.tsv"), "--vqa", p("s/vqa_train.tsv"), "--size",
               "150", "--out", p("v.txt")})
              .code == 0);

  for (const char* tag : {"1", "2"}) {
    const std::string t(tag);
    Result pre = run(with({"pretrain", "--train", p("s/captions_train.tsv"), "--val", p("s/captions_val.tsv"),
                           "--test", p("s/captions_test.tsv"), "--vocab", p("v.txt"), "--epochs", "2", "--lr",
                           "1e-3", "--out", p("pre" + t + ".ckpt")},
                          kTinyModel));
    REQUIRE_MESSAGE(pre.code == 0, pre.err);
    CHECK(pre.out.find("test masked_keyword_accuracy") != std::string::npos);
    Result ft = run({"finetune", "--init", p("pre" + t + ".ckpt"), "--train", p("s/vqa_train.tsv"), "--val",
                     p("s/vqa_val.tsv"), "--epochs", "2", "--out", p("ft" + t + ".ckpt")});
    REQUIRE_MESSAGE(ft.code == 0, ft.err);
    Result ev = run({"evaluate", "--test", p("s/vqa_test.tsv"), "--ckpt", p("ft" + t + ".ckpt"), "--predictions",
                     p("pred" + t + ".tsv"), "--report", p("report" + t + ".txt")});
    REQUIRE_MESSAGE(ev.code == 0, ev.err);
    CHECK(ev.out.find("MMBERT General") != std::string::npos);
    Result am = run({"attnmap", "--ckpt", p("ft" + t + ".ckpt"), "--image", first_image(dir / "s/vqa_test.tsv"),
                     "--question", "what shape is shown?", "--out", p("map" + t)});
    REQUIRE_MESSAGE(am.code == 0, am.err);
  }
  CHECK(slurp(p("pre1.ckpt")) == slurp(p("pre2.ckpt")));
  CHECK(slurp(p("ft1.ckpt")) == slurp(p("ft2.ckpt")));
  CHECK(slurp(p("pred1.tsv")) == slurp(p("pred2.tsv")));
  CHECK(slurp(p("report1.txt")) == slurp(p("report2.txt")));
  CHECK(slurp(p("map1.attn.pgm")) == slurp(p("map2.attn.pgm")));
  CHECK(slurp(p("map1.attn.ppm")) == slurp(p("map2.attn.ppm")));

  Result pr = run({"predict", "--ckpt", p("ft1.ckpt"), "--image", first_image(dir / "s/vqa_test.tsv"),
                   "--question", "What imaging modality was used?"});
  CHECK(pr.code == 0);
  CHECK(pr.out.find("\nanswer ") != std::string::npos);

  Result np = run({"finetune", "--variant", "np", "--init", p("pre1.ckpt"), "--train", p("s/vqa_train.tsv")});
  CHECK(np.code == cli::kExitUsage);

  Result ex = run({"evaluate", "--variant", "exclusive", "--dir", p("nothing"), "--test", p("s/vqa_test.tsv")});
  CHECK(ex.code == cli::kExitData);
  CHECK(ex.err.find("per-category") != std::string::npos);

  // Exclusive training and oracle-routed evaluation.
  Result ext = run({"finetune", "--variant", "exclusive", "--init", p("pre1.ckpt"), "--train", p("s/vqa_train.tsv"),
                    "--epochs", "1", "--out", p("ex")});
  REQUIRE_MESSAGE(ext.code == 0, ext.err);
  CHECK(std::filesystem::exists(dir / "ex/router.ckpt"));
  CHECK(std::filesystem::exists(dir / "ex/yesno.ckpt"));
  Result exo = run({"evaluate", "--variant", "exclusive", "--dir", p("ex"), "--routing", "oracle", "--test",
                    p("s/vqa_test.tsv")});
  CHECK(exo.code == 0);
  std::filesystem::remove(dir / "ex/plane.ckpt");
  Result missing = run({"evaluate", "--variant", "exclusive", "--dir", p("ex"), "--routing", "oracle", "--test",
                        p("s/vqa_test.tsv")});
  CHECK(missing.code == cli::kExitData);
  CHECK(missing.err.find("plane") != std::string::npos);
}

TEST_CASE("a run with nothing to learn is a numeric failure") {
  testing::TempDir dir("cli_empty");
  write(dir / "c.tsv", "a.ppm\tno keywords\n");
  write(dir / "v.txt", "[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\nno\n");
  Image img(32, 32, 0.5f);
  write_ppm(img, dir / "a.ppm");
  Result r = run(with({"pretrain", "--train", (dir / "c.tsv").string(), "--vocab", (dir / "v.txt").string(),
                       "--fallback_rate", "0", "--epochs", "1", "--out", (dir / "x.ckpt").string()},
                      kTinyModel));
  CHECK(r.code == cli::kExitNumeric);
}
