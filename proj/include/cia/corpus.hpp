#pragma once

#include <array>
#include <string_view>

namespace cia {

enum class Category { cls, cap, vqa };

inline constexpr std::array<Category, 3> kCategories = {Category::cls, Category::cap, Category::vqa};

inline std::string_view to_string(Category c) {
    switch (c) {
        case Category::cls: return "CLS";
        case Category::cap: return "CAP";
        case Category::vqa: return "VQA";
    }
    return "CLS";
}

// Cross-prompt corpus: ten prompts per task.
inline constexpr std::array<std::string_view, 10> kClsPrompts = {
    "If this image were turned into a jigsaw puzzle, what would the box label say to describe the picture inside?",
    "Classify the content of this image.",
    "If you were to label this image, what label would you give?",
    "What category best describes this image?",
    "Describe the central subject of this image in a single word.",
    "Provide a classification for the object depicted in this image.",
    "If this image were in a photo album, what would its label be?",
    "Categorize the content of the image.",
    "If you were to sort this image into a category, which one would it be?",
    "What keyword would you associate with this image?",
};

inline constexpr std::array<std::string_view, 10> kCapPrompts = {
    "Describe the content of this image.",
    "What's happening in this image?",
    "Provide a brief caption for this image.",
    "Tell a story about this image in one sentence.",
    "If this image could speak, what would it say?",
    "Summarize the scenario depicted in this image.",
    "What is the central theme or event shown in the picture?",
    "Create a headline for this image.",
    "Explain the scene captured in this image.",
    "If this were a postcard, what message would it convey?",
};

inline constexpr std::array<std::string_view, 10> kVqaPrompts = {
    "Any cutlery items visible in the image?",
    "Can you find any musical instruments in this image?",
    "Does the image appear to be a cartoon or comic strip?",
    "How many animals are present in the image?",
    "Is a chair noticeable in the image?",
    "How many statues or monuments stand prominently in the scene?",
    "How many different patterns or motifs are evident in clothing or objects?",
    "What is the spacing between objects or subjects in the image?",
    "Would you describe the image as bright or dark?",
    "What type of textures can be felt if one could touch the image's content?",
};

inline const std::array<std::string_view, 10>& bundled_prompts(Category c) {
    switch (c) {
        case Category::cls: return kClsPrompts;
        case Category::cap: return kCapPrompts;
        case Category::vqa: return kVqaPrompts;
    }
    return kClsPrompts;
}

}  // namespace cia
