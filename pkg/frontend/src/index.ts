export * from "./api.js";
export * from "./state.js";
export * from "./scatter.js";
export * from "./panels.js";
export * from "./app.js";
