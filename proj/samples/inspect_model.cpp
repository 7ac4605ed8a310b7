// Prints the header of a model file and how many primitives survive a sweep of the plane.
//   inspect_model model.clipgs

#include <cstdio>
#include <exception>

#include "clipgs/pipeline.hpp"

int main(int argc, char** argv) {
    if (argc != 2) {
        std::fprintf(stderr, "usage: inspect_model <model.clipgs>\n");
        return 2;
    }
    try {
        const clipgs::Model m = clipgs::load_model(argv[1]);
        std::printf("primitives  %zu\n", m.cloud.size());
        std::printf("truncation  %s (epsilon %.2f)\n", clipgs::to_string(m.meta.truncation), m.meta.epsilon);
        std::printf("aam         %s\n", m.aam ? "yes" : "no");
        if (m.aam) std::printf("aam weights %zu floats\n", m.aam->parameter_count());
        for (int k = 0; k <= 10; ++k) {
            const double z = m.meta.plane_min + (m.meta.plane_max - m.meta.plane_min) * k / 10.0;
            std::printf("z % .3f  visible %zu\n", z, clipgs::visible_count(m, z));
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 1;
    }
}
